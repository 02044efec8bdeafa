//! Matrix renewal measures on a window, pre-return occupation measures and
//! the Blackwell/Stone diagnostics.

use std::io::Write;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{GridMass, SlabQuery};
use crate::kernel::{KernelForm, KernelStats, LatticeType, SemiMarkovKernel};
use crate::perron::PerronData;
use crate::report::{fmt_num, write_table};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenewalOptions {
    /// Series stops once the n-step mass on `(-inf, b]` stays below this.
    pub eps: f64,
    pub min_terms: usize,
    pub consecutive: usize,
    pub max_terms: usize,
    pub exec: Exec,
}

impl Default for RenewalOptions {
    fn default() -> Self {
        Self { eps: 1e-8, min_terms: 16, consecutive: 3, max_terms: 20_000, exec: Exec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TruncationReport {
    pub n_terms: usize,
    /// Largest final-term statistic over rows.
    pub residual_bound: f64,
    /// Per-term statistic, maximised over rows.
    pub trace: Vec<f64>,
    /// Largest mass that left the working window on the left.
    pub left_escape: f64,
}

/// Windowed `m × m` measure such as `𝕍`, `𝕌` or a row of pre-return
/// occupation measures. Mass outside the window sits in overflow buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    pub m: usize,
    pub window: (f64, f64),
    pub step: f64,
    pub entries: Vec<GridMass>,
    pub report: TruncationReport,
}

impl GridMeasure {
    pub fn get(&self, i: usize, j: usize) -> &GridMass {
        &self.entries[i * self.m + j]
    }

    /// Mass of `(t, t+h]` for entry `(i, j)`.
    pub fn half_open(&self, i: usize, j: usize, t: f64, h: f64) -> f64 {
        SlabQuery::new(self.get(i, j)).half_open(t, h)
    }

    /// Mass of `[t, t+h]` for entry `(i, j)`.
    pub fn closed(&self, i: usize, j: usize, t: f64, h: f64) -> f64 {
        SlabQuery::new(self.get(i, j)).closed(t, h)
    }

    /// Rows `(i, j, cell_left, cell_right, mass, atom_flag)` with 1-based
    /// state indices; atoms have `cell_left = cell_right`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows = Vec::new();
        for i in 0..self.m {
            for j in 0..self.m {
                let g = self.get(i, j);
                for &(x, w) in &g.atoms {
                    rows.push(vec![(i + 1).to_string(), (j + 1).to_string(), fmt_num(x), fmt_num(x), fmt_num(w), "1".into()]);
                }
                for (idx, &c) in g.cells.iter().enumerate() {
                    let l = (g.start + idx as i64) as f64 * g.step;
                    rows.push(vec![
                        (i + 1).to_string(),
                        (j + 1).to_string(),
                        fmt_num(l),
                        fmt_num(l + g.step),
                        fmt_num(c),
                        "0".into(),
                    ]);
                }
            }
        }
        write_table(out, &["i", "j", "cell_left", "cell_right", "mass", "atom_flag"], rows)
    }
}

fn snap_window(window: (f64, f64), step: f64) -> Result<(f64, f64)> {
    let (a, b) = window;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::Invalid(format!("window [{a}, {b}] is not a bounded interval")));
    }
    Ok(((a / step + 1e-9).floor() * step, (b / step - 1e-9).ceil() * step))
}

/// Working range used while summing: extra room on the right lets mass come
/// back from beyond `b` when increments can be negative, and extra room on the
/// left catches excursions below `a`.
fn working_window(k: &SemiMarkovKernel, a: f64, b: f64) -> (f64, f64) {
    let neg = k.negative_reach();
    if neg > 0.0 {
        (a - 0.25 * (b - a), b + 4.0 * neg)
    } else {
        (a, b)
    }
}

struct RowSeries {
    acc: Vec<GridMass>,
    n_terms: usize,
    trace: Vec<f64>,
}

/// Sums `Σ_n T_n` for one row, with `T_0 = δ_0 e_i` and
/// `T_{n+1}(j) = Σ_l T_n(l) ∗ K_lj`, where columns listed in `taboo` are
/// removed from the kernel.
#[allow(clippy::too_many_arguments)]
fn row_series(
    k: &SemiMarkovKernel,
    i: usize,
    stat_weights: &[f64],
    work: (f64, f64),
    b: f64,
    taboo: Option<usize>,
    opts: &RenewalOptions,
) -> Result<RowSeries> {
    let m = k.dim();
    let step = k.step;
    let mut term: Vec<GridMass> =
        (0..m).map(|j| if j == i { GridMass::point(0.0, 1.0, step) } else { GridMass::zero(step) }).collect();
    let mut acc = term.clone();
    let mut trace = Vec::new();
    let mut below = 0usize;
    let mut n = 0usize;
    loop {
        n += 1;
        if n > opts.max_terms {
            return Err(Error::TruncationFailure { terms: opts.max_terms, last_mass: trace.last().copied().unwrap_or(f64::NAN) });
        }
        let mut next = Vec::with_capacity(m);
        for j in 0..m {
            let mut t = GridMass::zero(step);
            if taboo != Some(j) {
                for (l, tl) in term.iter().enumerate() {
                    let w = k.weight(l, j);
                    if w <= 0.0 || tl.is_zero() {
                        continue;
                    }
                    t.add_scaled(&tl.convolve(&k.dist(l, j).mass)?, w)?;
                }
                t.truncate(work.0, work.1);
            }
            next.push(t);
        }
        let stat: f64 = match taboo {
            // pre-return measures: all remaining mass counts
            Some(_) => next.iter().zip(stat_weights).map(|(t, w)| w / stat_weights[i] * t.total()).sum(),
            None => next.iter().zip(stat_weights).map(|(t, w)| w / stat_weights[i] * t.support_mass_le(b)).sum(),
        };
        for (a, t) in acc.iter_mut().zip(&next) {
            a.add_scaled(t, 1.0)?;
        }
        trace.push(stat);
        below = if stat < opts.eps { below + 1 } else { 0 };
        term = next;
        if below >= opts.consecutive && n >= opts.min_terms {
            break;
        }
    }
    Ok(RowSeries { acc, n_terms: n, trace })
}

fn stat_weights(k: &SemiMarkovKernel, pd: &PerronData) -> Vec<f64> {
    match k.form {
        KernelForm::Q => pd.v.iter().copied().collect(),
        KernelForm::P => vec![1.0; k.dim()],
    }
}

fn assemble(
    m: usize,
    window: (f64, f64),
    step: f64,
    rows: Vec<RowSeries>,
) -> GridMeasure {
    let mut entries = Vec::with_capacity(m * m);
    let mut report = TruncationReport::default();
    for row in rows {
        report.n_terms = report.n_terms.max(row.n_terms);
        report.residual_bound = report.residual_bound.max(*row.trace.last().unwrap_or(&0.0));
        if report.trace.len() < row.trace.len() {
            report.trace.resize(row.trace.len(), 0.0);
        }
        for (r, s) in report.trace.iter_mut().zip(&row.trace) {
            *r = r.max(*s);
        }
        for mut g in row.acc {
            report.left_escape = report.left_escape.max(g.overflow_left);
            g.truncate(window.0, window.1);
            entries.push(g);
        }
    }
    GridMeasure { m, window, step, entries, report }
}

/// Renewal measure `Σ_n K^{*n}` of the kernel on `window`: `𝕍` for a `Q`-form
/// kernel, `𝕌` for its harmonic transform.
///
/// Each row is summed until the `n`-step statistic `Σ_j (w_j / w_i) T_n(i,j)`
/// restricted to `(-inf, b]` stays below `eps` for `consecutive` terms, with
/// `w = v` for `Q`-form and `w = 1` for `P`-form kernels. Both forms therefore
/// stop at the same `n` and remain exactly related by `D`.
pub fn renewal_measure(
    k: &SemiMarkovKernel,
    pd: &PerronData,
    stats: &KernelStats,
    window: (f64, f64),
    opts: &RenewalOptions,
) -> Result<GridMeasure> {
    if !(stats.mu > 0.0) {
        return Err(Error::NonPositiveDrift { mu: stats.mu });
    }
    let (a, b) = snap_window(window, k.step)?;
    let work = working_window(k, a, b);
    let w = stat_weights(k, pd);
    let m = k.dim();
    let rows = opts.exec.try_map(m, |i| row_series(k, i, &w, work, b, None, opts))?;
    Ok(assemble(m, (a, b), k.step, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UvDirection {
    /// `𝕍 = D𝕌D⁻¹`
    UToV,
    /// `𝕌 = D⁻¹𝕍D`
    VToU,
}

/// Entrywise rescaling between `𝕌` and `𝕍`.
pub fn uv_transform(g: &GridMeasure, pd: &PerronData, direction: UvDirection) -> GridMeasure {
    let mut out = g.clone();
    for i in 0..g.m {
        for j in 0..g.m {
            let c = match direction {
                UvDirection::UToV => pd.v[i] / pd.v[j],
                UvDirection::VToU => pd.v[j] / pd.v[i],
            };
            if i != j {
                out.entries[i * g.m + j].scale(c);
            }
        }
    }
    out
}

/// Pre-return occupation measure `Û_i`: row `i` of the series for the kernel
/// with every transition into `i` removed. For a `P`-form kernel the total
/// masses are `π_j / π_i`.
pub fn taboo_occupation(k: &SemiMarkovKernel, pd: &PerronData, i: usize, window: (f64, f64), opts: &RenewalOptions) -> Result<GridMeasure> {
    let m = k.dim();
    if i >= m {
        return Err(Error::Invalid(format!("state {i} out of range")));
    }
    let (a, b) = snap_window(window, k.step)?;
    let work = working_window(k, a, b);
    let w = stat_weights(k, pd);
    let row = row_series(k, i, &w, work, b, Some(i), opts)?;
    let mut gm = assemble(m, (a, b), k.step, vec![row]);
    // store as a full matrix with only row i populated
    let mut entries = vec![GridMass::zero(k.step); m * m];
    for (j, g) in gm.entries.drain(..).enumerate() {
        entries[i * m + j] = g;
    }
    gm.entries = entries;
    Ok(gm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationReport {
    pub max_cell_diff: f64,
    pub max_atom_diff: f64,
    /// Difference between the two convolution orders.
    pub order_diff: f64,
}

fn max_diff_on(a: &GridMass, b: &GridMass, lo: f64, hi: f64) -> (f64, f64) {
    let step = a.step;
    let k0 = (lo / step + 1e-9).floor() as i64;
    let k1 = (hi / step - 1e-9).ceil() as i64;
    let cells = (k0..k1).map(|k| (a.cell(k) - b.cell(k)).abs()).fold(0.0, f64::max);
    let qa = SlabQuery::new(a);
    let qb = SlabQuery::new(b);
    let mut atoms: f64 = 0.0;
    for &(x, _) in a.atoms.iter().chain(&b.atoms) {
        if x >= lo && x <= hi {
            atoms = atoms.max((qa.closed(x, 0.0) - qb.closed(x, 0.0)).abs());
        }
    }
    (cells, atoms)
}

/// Checks `𝕌_ij = Û_i({j}×·) ∗ 𝕌_ii` on `[lo, hi]`.
pub fn factorization_check(u: &GridMeasure, taboo: &GridMeasure, i: usize, j: usize, range: (f64, f64)) -> Result<FactorizationReport> {
    let uii = u.get(i, i);
    let left = taboo.get(i, j).convolve(uii)?;
    let right = uii.convolve(taboo.get(i, j))?;
    let (max_cell_diff, max_atom_diff) = max_diff_on(u.get(i, j), &left, range.0, range.1);
    let (oc, oa) = max_diff_on(&left, &right, range.0, range.1);
    Ok(FactorizationReport { max_cell_diff, max_atom_diff, order_diff: oc.max(oa) })
}

/// Sup-norm of `𝕌 − δ_0 I − K ∗ 𝕌` over cells and atoms in `range`.
pub fn renewal_identity_residual(k: &SemiMarkovKernel, u: &GridMeasure, range: (f64, f64)) -> Result<f64> {
    let m = u.m;
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            let mut rhs = if i == j { GridMass::point(0.0, 1.0, u.step) } else { GridMass::zero(u.step) };
            for l in 0..m {
                let w = k.weight(i, l);
                if w > 0.0 {
                    rhs.add_scaled(&k.dist(i, l).mass.convolve(u.get(l, j))?, w)?;
                }
            }
            let (c, a) = max_diff_on(u.get(i, j), &rhs, range.0, range.1);
            worst = worst.max(c).max(a);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalBoundEntry {
    pub i: usize,
    pub j: usize,
    pub sup: f64,
    pub argsup: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalBoundReport {
    pub h: f64,
    pub entries: Vec<LocalBoundEntry>,
    pub max_ratio: f64,
}

/// Checks `sup_t 𝕌_ij([t,t+h]) ≤ π_j^{(i)} 𝕌_ii([−h,h])` over the window, with
/// `π^{(i)} = π / π_i`.
pub fn local_bound_check(u: &GridMeasure, pd: &PerronData, h: f64) -> LocalBoundReport {
    let (a, b) = u.window;
    let m = u.m;
    let mut entries = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for i in 0..m {
        let uii = SlabQuery::new(u.get(i, i)).closed(-h, 2.0 * h);
        for j in 0..m {
            let g = u.get(i, j);
            let q = SlabQuery::new(g);
            // slab mass is piecewise linear in t; breakpoints are cell
            // boundaries and atoms hitting either end of the slab
            let mut cands: Vec<f64> = Vec::new();
            let k0 = (a / u.step).floor() as i64;
            let k1 = (b / u.step).ceil() as i64;
            for k in k0..=k1 {
                let x = k as f64 * u.step;
                cands.push(x);
                cands.push(x - h);
            }
            for &(x, _) in &g.atoms {
                cands.push(x);
                cands.push(x - h);
            }
            let mut sup = 0.0;
            let mut argsup = a;
            for t in cands {
                if t < a - h || t > b {
                    continue;
                }
                let s = q.closed(t, h);
                if s > sup {
                    sup = s;
                    argsup = t;
                }
            }
            let bound = pd.pi[j] / pd.pi[i] * uii;
            if bound > 0.0 {
                max_ratio = max_ratio.max(sup / bound);
            } else if sup > 0.0 {
                max_ratio = f64::INFINITY;
            }
            entries.push(LocalBoundEntry { i, j, sup, argsup, bound });
        }
    }
    LocalBoundReport { h, entries, max_ratio }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackwellRow {
    pub i: usize,
    pub j: usize,
    pub t: f64,
    pub increment: f64,
    pub limit: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackwellReport {
    pub h: f64,
    pub rows: Vec<BlackwellRow>,
    /// Increments near the left end of the window, compared against 0.
    pub left_edge: Vec<BlackwellRow>,
}

impl BlackwellReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.abs_err / r.limit.abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
    }

    pub fn max_left_edge(&self) -> f64 {
        self.left_edge.iter().map(|r| r.increment.abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = self.rows.iter().chain(&self.left_edge).map(|r| {
            vec![
                (r.i + 1).to_string(),
                (r.j + 1).to_string(),
                fmt_num(r.t),
                fmt_num(self.h),
                fmt_num(r.increment),
                fmt_num(r.limit),
                fmt_num(r.abs_err),
            ]
        });
        write_table(out, &["i", "j", "t", "h", "increment", "limit", "abs_err"], rows)
    }
}

/// Increments `𝕍_ij((t, t+h])` against `v_i u_j h / μ` at each `t_eval`, and
/// left-edge increments against 0.
pub fn blackwell_check(v: &GridMeasure, pd: &PerronData, stats: &KernelStats, h: f64, t_eval: &[f64]) -> Result<BlackwellReport> {
    if let LatticeType::Arithmetic { span, .. } = stats.lattice {
        return Err(Error::ArithmeticKernel { span });
    }
    let m = v.m;
    let mut rows = Vec::new();
    let mut left_edge = Vec::new();
    let (a, _) = v.window;
    for i in 0..m {
        for j in 0..m {
            let q = SlabQuery::new(v.get(i, j));
            let limit = pd.v[i] * pd.u[j] * h / stats.mu;
            for &t in t_eval {
                let inc = q.half_open(t, h);
                rows.push(BlackwellRow { i, j, t, increment: inc, limit, abs_err: (inc - limit).abs() });
            }
            for k in 0..3 {
                let t = a + k as f64 * h;
                let inc = q.half_open(t, h);
                left_edge.push(BlackwellRow { i, j, t, increment: inc, limit: 0.0, abs_err: inc.abs() });
            }
        }
    }
    Ok(BlackwellReport { h, rows, left_edge })
}

/// Arithmetic counterpart: for span `d` and shifts `γ`, the mass of
/// `(s - d/2, s + d/2]` at lattice points `s ∈ γ(j) − γ(i) + dℤ` near each
/// `t_eval`, against `v_i u_j d / μ`.
pub fn lattice_blackwell_check(v: &GridMeasure, pd: &PerronData, stats: &KernelStats, t_eval: &[f64]) -> Result<BlackwellReport> {
    let (d, shifts) = match &stats.lattice {
        LatticeType::Arithmetic { span, shifts } => (*span, shifts.clone()),
        _ => return Err(Error::Invalid("kernel is not arithmetic".into())),
    };
    let m = v.m;
    let mut rows = Vec::new();
    let mut left_edge = Vec::new();
    let (a, _) = v.window;
    for i in 0..m {
        for j in 0..m {
            let q = SlabQuery::new(v.get(i, j));
            let off = shifts[j] - shifts[i];
            let limit = pd.v[i] * pd.u[j] * d / stats.mu;
            let snap = |t: f64| off + ((t - off) / d).round() * d;
            for &t in t_eval {
                let s = snap(t);
                let inc = q.half_open(s - 0.5 * d, d);
                rows.push(BlackwellRow { i, j, t: s, increment: inc, limit, abs_err: (inc - limit).abs() });
            }
            for k in 0..3 {
                let s = snap(a + (k as f64 + 0.5) * d);
                let inc = q.half_open(s - 0.5 * d, d);
                left_edge.push(BlackwellRow { i, j, t: s, increment: inc, limit: 0.0, abs_err: inc.abs() });
            }
        }
    }
    Ok(BlackwellReport { h: d, rows, left_edge })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoneDiagnostics {
    /// Left end of the first density cell.
    pub origin: f64,
    pub step: f64,
    /// Smoothed densities per entry (row-major), one value per window cell.
    pub densities: Vec<Vec<f64>>,
    pub right_edge: Vec<f64>,
    pub left_edge: Vec<f64>,
    /// `v_i u_j / μ` per entry.
    pub limits: Vec<f64>,
    pub min_density: f64,
}

impl StoneDiagnostics {
    pub fn max_right_rel_err(&self) -> f64 {
        self.right_edge.iter().zip(&self.limits).map(|(e, l)| ((e - l) / l).abs()).fold(0.0, f64::max)
    }

    pub fn max_left_edge(&self) -> f64 {
        self.left_edge.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// Density part of `𝕍` (atoms separated), smoothed by a centered moving
/// average of `smooth` length units, with edge estimates averaged over the
/// outer `edge_fraction` of the window.
pub fn stone_density(v: &GridMeasure, pd: &PerronData, stats: &KernelStats, smooth: f64, edge_fraction: f64) -> Result<StoneDiagnostics> {
    if !stats.lattice.is_spread_out() {
        return Err(Error::NotSpreadOut);
    }
    let (a, b) = v.window;
    let k0 = (a / v.step).round() as i64;
    let k1 = (b / v.step).round() as i64;
    let n = (k1 - k0) as usize;
    let half = ((smooth / v.step / 2.0).round() as usize).max(0);
    let edge = ((n as f64 * edge_fraction).round() as usize).clamp(1, n);
    let mut densities = Vec::with_capacity(v.m * v.m);
    let mut right_edge = Vec::new();
    let mut left_edge = Vec::new();
    let mut limits = Vec::new();
    let mut min_density = f64::INFINITY;
    for i in 0..v.m {
        for j in 0..v.m {
            let g = v.get(i, j);
            let raw: Vec<f64> = (k0..k1).map(|k| g.cell(k) / v.step).collect();
            let mut prefix = vec![0.0; n + 1];
            for (idx, x) in raw.iter().enumerate() {
                prefix[idx + 1] = prefix[idx] + x;
            }
            let smooth: Vec<f64> = (0..n)
                .map(|idx| {
                    let lo = idx.saturating_sub(half);
                    let hi = (idx + half + 1).min(n);
                    (prefix[hi] - prefix[lo]) / (hi - lo) as f64
                })
                .collect();
            min_density = smooth.iter().copied().fold(min_density, f64::min);
            right_edge.push(smooth[n - edge..].iter().sum::<f64>() / edge as f64);
            left_edge.push(smooth[..edge].iter().sum::<f64>() / edge as f64);
            limits.push(pd.v[i] * pd.u[j] / stats.mu);
            densities.push(smooth);
        }
    }
    Ok(StoneDiagnostics { origin: k0 as f64 * v.step, step: v.step, densities, right_edge, left_edge, limits, min_density })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;
    use crate::kernel::stationary_drift;
    use crate::perron::{perron_pair, QSMatrix, DEFAULT_TOL};
    use approx::assert_abs_diff_eq;

    fn alternating_points() -> SemiMarkovKernel {
        let q = QSMatrix::from_rows(&[vec![0.0, 2.0], vec![0.5, 0.0]]).unwrap();
        let p = Some(Family::Point { x: 1.0 });
        SemiMarkovKernel::from_families(q, &[None, p.clone(), p, None], 0.01).unwrap()
    }

    #[test]
    fn alternating_atoms() {
        let k = alternating_points();
        let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
        let st = stationary_drift(&k, &pd).unwrap();
        let v = renewal_measure(&k, &pd, &st, (-2.0, 20.0), &RenewalOptions::default()).unwrap();
        let v11 = v.get(0, 0);
        assert!(v11.cells.is_empty());
        assert_eq!(v11.atoms.len(), 11);
        for (n, &(x, w)) in v11.atoms.iter().enumerate() {
            assert_abs_diff_eq!(x, 2.0 * n as f64, epsilon = 1e-9);
            assert_abs_diff_eq!(w, 1.0, epsilon = 1e-12);
        }
        let u = uv_transform(&v, &pd, UvDirection::VToU);
        assert_abs_diff_eq!(v.get(0, 1).atoms[0].1, 2.0 * u.get(0, 1).atoms[0].1, epsilon = 1e-12);
        let back = uv_transform(&u, &pd, UvDirection::UToV);
        for (x, y) in back.entries.iter().zip(&v.entries) {
            for (p, q) in x.atoms.iter().zip(&y.atoms) {
                assert_abs_diff_eq!(p.1, q.1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn taboo_alternating() {
        let k = alternating_points();
        let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
        let kp = k.harmonic(&pd).unwrap();
        let t = taboo_occupation(&kp, &pd, 0, (-2.0, 20.0), &RenewalOptions::default()).unwrap();
        assert_abs_diff_eq!(t.get(0, 0).total(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.get(0, 1).total(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn poisson_local_bound() {
        let q = QSMatrix::from_rows(&[vec![1.0]]).unwrap();
        let k = SemiMarkovKernel::from_families(q, &[Some(Family::Exp { rate: 1.0 })], 0.01).unwrap();
        let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
        let st = stationary_drift(&k, &pd).unwrap();
        let u = renewal_measure(&k, &pd, &st, (-2.0, 15.0), &RenewalOptions::default()).unwrap();
        let r = local_bound_check(&u, &pd, 1.0);
        assert_abs_diff_eq!(r.entries[0].bound, 2.0, epsilon = 1e-3);
        assert_abs_diff_eq!(r.entries[0].sup, 2.0, epsilon = 1e-3);
        assert!(r.max_ratio <= 1.0 + 1e-9, "{}", r.max_ratio);
    }

    #[test]
    fn csv_rows() {
        let k = alternating_points();
        let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
        let st = stationary_drift(&k, &pd).unwrap();
        let v = renewal_measure(&k, &pd, &st, (-1.0, 4.0), &RenewalOptions::default()).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("i,j,cell_left,cell_right,mass,atom_flag\n1,1,0,0,1,1\n1,1,2,2,1,1\n"), "{s}");
    }

    #[test]
    fn arithmetic_blackwell_rejected() {
        let k = alternating_points();
        let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
        let st = stationary_drift(&k, &pd).unwrap();
        let v = renewal_measure(&k, &pd, &st, (-1.0, 30.0), &RenewalOptions::default()).unwrap();
        assert!(matches!(blackwell_check(&v, &pd, &st, 1.0, &[20.0]), Err(Error::ArithmeticKernel { .. })));
        let r = lattice_blackwell_check(&v, &pd, &st, &[20.0, 25.0]).unwrap();
        assert!(r.max_rel_err() < 1e-12, "{:?}", r.rows);
        assert!(matches!(stone_density(&v, &pd, &st, 0.5, 0.1), Err(Error::NotSpreadOut)));
    }
}

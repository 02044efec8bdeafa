//! Markov renewal equations `Z = z + (Q⊗F) ∗ Z`: admissibility checks,
//! the solution `Z* = 𝕍 ∗ z`, residuals, the homogeneous (Choquet-Deny)
//! probe and the key-renewal limit.

use std::io::Write;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{convolve_seq, same_step, split_location, GridMass};
use crate::kernel::{KernelForm, KernelStats, SemiMarkovKernel};
use crate::perron::PerronData;
use crate::renewal::GridMeasure;
use crate::report::{fmt_num, write_table};

/// Declared behavior of a function beyond the sampled window.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TailDecay {
    Zero,
    Exponential { rate: f64 },
    /// `|g(x)| ≈ |g(edge)| (|edge| / |x|)^power`
    Polynomial { power: f64 },
    Constant,
    #[default]
    Unknown,
}

/// Function on `states × ℝ` stored as per-cell averages over a window, with
/// constant extension values outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub m: usize,
    pub step: f64,
    /// Grid index of the first cell.
    pub start: i64,
    /// `values[i][n]` is the average of `g_i` over cell `start + n`.
    pub values: Vec<Vec<f64>>,
    pub left_tail: Vec<f64>,
    pub right_tail: Vec<f64>,
    pub left_decay: TailDecay,
    pub right_decay: TailDecay,
}

const GL_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

fn cell_range(window: (f64, f64), step: f64) -> Result<(i64, usize)> {
    let (a, b) = window;
    if !(a.is_finite() && b.is_finite() && a < b && step > 0.0) {
        return Err(Error::Invalid(format!("window [{a}, {b}] with step {step} is not usable")));
    }
    let k0 = (a / step + 1e-9).floor() as i64;
    let k1 = (b / step - 1e-9).ceil() as i64;
    Ok((k0, (k1 - k0) as usize))
}

impl GridFunction {
    pub fn zeros(m: usize, window: (f64, f64), step: f64) -> Result<Self> {
        let (start, n) = cell_range(window, step)?;
        Ok(Self {
            m,
            step,
            start,
            values: vec![vec![0.0; n]; m],
            left_tail: vec![0.0; m],
            right_tail: vec![0.0; m],
            left_decay: TailDecay::Zero,
            right_decay: TailDecay::Zero,
        })
    }

    /// Samples `f(i, t)` by three-point Gauss-Legendre averages on each cell.
    /// Tails default to zero with unknown decay; set them explicitly when the
    /// function does not vanish outside the window.
    pub fn from_fn(m: usize, window: (f64, f64), step: f64, f: impl Fn(usize, f64) -> f64) -> Result<Self> {
        let mut g = Self::zeros(m, window, step)?;
        g.left_decay = TailDecay::Unknown;
        g.right_decay = TailDecay::Unknown;
        for i in 0..m {
            for (n, val) in g.values[i].iter_mut().enumerate() {
                let mid = ((g.start + n as i64) as f64 + 0.5) * step;
                *val = GL_NODES.iter().zip(GL_WEIGHTS).map(|(x, w)| w * f(i, mid + 0.5 * step * x)).sum();
            }
        }
        Ok(g)
    }

    /// `c_i` on the whole line.
    pub fn constant(values: &[f64], window: (f64, f64), step: f64) -> Result<Self> {
        let mut g = Self::from_fn(values.len(), window, step, |i, _| values[i])?;
        g.left_tail = values.to_vec();
        g.right_tail = values.to_vec();
        g.left_decay = TailDecay::Constant;
        g.right_decay = TailDecay::Constant;
        Ok(g)
    }

    pub fn with_tails(mut self, left: TailDecay, right: TailDecay) -> Self {
        self.left_decay = left;
        self.right_decay = right;
        self
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self) -> (f64, f64) {
        (self.start as f64 * self.step, (self.start + self.len() as i64) as f64 * self.step)
    }

    pub fn cell_left(&self, n: usize) -> f64 {
        (self.start + n as i64) as f64 * self.step
    }

    /// Cell average at grid index `k`, or the tail value outside the window.
    pub fn at_index(&self, i: usize, k: i64) -> f64 {
        if k < self.start {
            self.left_tail[i]
        } else if k >= self.start + self.len() as i64 {
            self.right_tail[i]
        } else {
            self.values[i][(k - self.start) as usize]
        }
    }

    /// Value of the cell containing `t`.
    pub fn eval(&self, i: usize, t: f64) -> f64 {
        self.at_index(i, (t / self.step).floor() as i64)
    }

    fn check_same_grid(&self, other: &GridFunction) -> Result<()> {
        same_step(self.step, other.step)?;
        if self.start != other.start || self.len() != other.len() || self.m != other.m {
            return Err(Error::Invalid("functions live on different windows".into()));
        }
        Ok(())
    }

    /// `self + c · other` on the same window.
    pub fn add_scaled(&self, other: &GridFunction, c: f64) -> Result<GridFunction> {
        self.check_same_grid(other)?;
        let mut out = self.clone();
        for i in 0..self.m {
            for (x, y) in out.values[i].iter_mut().zip(&other.values[i]) {
                *x += c * y;
            }
            out.left_tail[i] += c * other.left_tail[i];
            out.right_tail[i] += c * other.right_tail[i];
        }
        Ok(out)
    }

    /// `self + c · w` for a constant vector `w` (for instance `c · v`).
    pub fn add_constant(&self, w: &[f64], c: f64) -> GridFunction {
        let mut out = self.clone();
        for i in 0..self.m {
            out.values[i].iter_mut().for_each(|x| *x += c * w[i]);
            out.left_tail[i] += c * w[i];
            out.right_tail[i] += c * w[i];
        }
        out
    }

    /// Componentwise division by `w` (for `Ẑ = D⁻¹Z`).
    pub fn divide(&self, w: &[f64]) -> GridFunction {
        let mut out = self.clone();
        for i in 0..self.m {
            out.values[i].iter_mut().for_each(|x| *x /= w[i]);
            out.left_tail[i] /= w[i];
            out.right_tail[i] /= w[i];
        }
        out
    }

    /// Per-state `∫ g_i`, cells plus declared tails.
    pub fn integrals(&self) -> Vec<f64> {
        let (a, b) = self.window();
        (0..self.m)
            .map(|i| {
                let body: f64 = self.values[i].iter().sum::<f64>() * self.step;
                let left = tail_integral(self.values[i].first().copied().unwrap_or(0.0), self.left_tail[i], self.left_decay, a.abs());
                let right = tail_integral(self.values[i].last().copied().unwrap_or(0.0), self.right_tail[i], self.right_decay, b.abs());
                body + left + right
            })
            .collect()
    }

    /// Rows `(state, cell_left, cell_right, value)` with 1-based states.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows = Vec::new();
        for i in 0..self.m {
            for (n, &x) in self.values[i].iter().enumerate() {
                let l = self.cell_left(n);
                rows.push(vec![(i + 1).to_string(), fmt_num(l), fmt_num(l + self.step), fmt_num(x)]);
            }
        }
        write_table(out, &["state", "cell_left", "cell_right", "value"], rows)
    }
}

fn tail_integral(edge: f64, tail: f64, decay: TailDecay, dist: f64) -> f64 {
    match decay {
        TailDecay::Zero => 0.0,
        TailDecay::Exponential { rate } => edge / rate,
        TailDecay::Polynomial { power } if power > 1.0 => edge * dist.max(1.0) / (power - 1.0),
        TailDecay::Constant if tail == 0.0 => 0.0,
        _ => f64::NAN,
    }
}

/// Cell averages of `(μ ∗ f_i)` on cells `out_start .. out_start + out_len`.
fn apply_measure(g: &GridMass, f: &GridFunction, i: usize, out_start: i64, out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    if !g.cells.is_empty() {
        // G(p) = (f(p-1) + f(p)) / 2 is what a uniform cell mass sees
        let ms = g.start;
        let me = g.end();
        let pl = out_start - (me - 1);
        let ph = out_start + out_len as i64 - 1 - ms;
        let gext: Vec<f64> = (pl..=ph).map(|p| 0.5 * (f.at_index(i, p - 1) + f.at_index(i, p))).collect();
        let conv = convolve_seq(&g.cells, &gext);
        for (n, o) in out.iter_mut().enumerate() {
            let r = (out_start + n as i64 - ms - pl) as usize;
            *o += conv[r];
        }
    }
    for &(x, w) in &g.atoms {
        let (s, frac) = split_location(x, g.step);
        for (n, o) in out.iter_mut().enumerate() {
            let k = out_start + n as i64 - s;
            *o += w * (frac * f.at_index(i, k - 1) + (1.0 - frac) * f.at_index(i, k));
        }
    }
    let tails = g.overflow_right * f.left_tail[i] + g.overflow_left * f.right_tail[i];
    if tails != 0.0 {
        out.iter_mut().for_each(|o| *o += tails);
    }
    out
}

/// `(K ∗ Z)_i = Σ_j q_ij F_ij ∗ Z_j` on the window of `z`. The result's tails
/// repeat its edge values.
pub fn kernel_apply(k: &SemiMarkovKernel, z: &GridFunction, exec: Exec) -> Result<GridFunction> {
    same_step(k.step, z.step)?;
    let m = k.dim();
    let n = z.len();
    let values = exec.map(m, |i| {
        let mut acc = vec![0.0; n];
        for j in 0..m {
            let w = k.weight(i, j);
            if w > 0.0 {
                for (a, x) in acc.iter_mut().zip(apply_measure(&k.dist(i, j).mass, z, j, z.start, n)) {
                    *a += w * x;
                }
            }
        }
        acc
    });
    let mut out = z.clone();
    for i in 0..m {
        out.left_tail[i] = (0..m).map(|j| k.weight(i, j) * z.left_tail[j]).sum();
        out.right_tail[i] = (0..m).map(|j| k.weight(i, j) * z.right_tail[j]).sum();
    }
    out.values = values;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriReport {
    pub dri: bool,
    /// `Σ_i λ_i Σ_n sup_{cell n} |g_i|` at the chosen mesh, tails included.
    pub sup_sum: f64,
    /// Bounded, vanishing at both ends, and `Σ λ_i ‖g_i‖_1 < ∞`.
    pub spread_out_ok: bool,
    pub sup_norms: Vec<f64>,
    pub l1_norms: Vec<f64>,
    /// Certification refers to the window plus declared tails only.
    pub window_only: bool,
}

fn tail_sup_sum(edge: f64, tail: f64, decay: TailDecay, mesh: f64, dist: f64) -> f64 {
    let e = edge.abs();
    match decay {
        TailDecay::Zero => 0.0,
        TailDecay::Exponential { rate } => {
            let r = (-rate * mesh).exp();
            e * r / (1.0 - r)
        }
        TailDecay::Polynomial { power } if power > 1.0 => e * dist.max(1.0) / ((power - 1.0) * mesh),
        TailDecay::Polynomial { .. } => f64::INFINITY,
        TailDecay::Constant if tail == 0.0 => 0.0,
        TailDecay::Constant => f64::INFINITY,
        TailDecay::Unknown => {
            if e == 0.0 && tail == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        }
    }
}

fn vanishes(edge: f64, tail: f64, decay: TailDecay) -> bool {
    match decay {
        TailDecay::Zero | TailDecay::Exponential { .. } | TailDecay::Polynomial { .. } => true,
        TailDecay::Constant => tail == 0.0,
        TailDecay::Unknown => edge == 0.0 && tail == 0.0,
    }
}

/// Direct Riemann integrability with weights `lambda` at mesh `mesh` (a
/// multiple of the grid step), plus the relaxed spread-out conditions.
pub fn dri_check(g: &GridFunction, lambda: &[f64], mesh: f64) -> DriReport {
    let r = ((mesh / g.step).round() as usize).max(1);
    let mesh = r as f64 * g.step;
    let (a, b) = g.window();
    let mut sup_sum = 0.0;
    let mut sup_norms = Vec::with_capacity(g.m);
    let mut l1_norms = Vec::with_capacity(g.m);
    let mut spread_out_ok = true;
    for i in 0..g.m {
        let vals = &g.values[i];
        let n = vals.len();
        let mut s = 0.0;
        let mut blk = 0;
        while blk < n {
            // neighbours guard against peaks straddling block edges
            let lo = blk.saturating_sub(1);
            let hi = (blk + r + 1).min(n);
            s += vals[lo..hi].iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
            blk += r;
        }
        let first = vals.first().copied().unwrap_or(0.0);
        let last = vals.last().copied().unwrap_or(0.0);
        s += tail_sup_sum(first, g.left_tail[i], g.left_decay, mesh, a.abs());
        s += tail_sup_sum(last, g.right_tail[i], g.right_decay, mesh, b.abs());
        sup_sum += lambda[i] * s;
        let sup = vals.iter().fold(g.left_tail[i].abs().max(g.right_tail[i].abs()), |acc, x| acc.max(x.abs()));
        sup_norms.push(sup);
        let l1 = vals.iter().map(|x| x.abs()).sum::<f64>() * g.step
            + tail_integral(first.abs(), g.left_tail[i].abs(), g.left_decay, a.abs())
            + tail_integral(last.abs(), g.right_tail[i].abs(), g.right_decay, b.abs());
        l1_norms.push(l1);
        spread_out_ok &= vanishes(first, g.left_tail[i], g.left_decay)
            && vanishes(last, g.right_tail[i], g.right_decay)
            && sup.is_finite()
            && l1.is_finite();
    }
    DriReport { dri: sup_sum.is_finite(), sup_sum, spread_out_ok, sup_norms, l1_norms, window_only: true }
}

/// Window-level class diagnostics for a solution candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    /// Largest `|Ẑ_i|` over the three leftmost cells.
    pub left_edge_max: f64,
    pub left_vanishing: bool,
    /// `max_i ‖Ẑ_i‖_∞` on the window; for finite state spaces the classes
    /// `ℒ` and `ℒ₀` coincide, so this is the `ℒ₀` certificate as well.
    pub sup_norm: f64,
    pub bounded: bool,
    /// Largest jump between adjacent cells, a continuity proxy for `C_b`.
    pub max_jump: f64,
    pub window_only: bool,
}

pub fn class_report(z: &GridFunction, pd: &PerronData, left_tol: f64) -> ClassReport {
    let v: Vec<f64> = pd.v.iter().copied().collect();
    let zh = z.divide(&v);
    let mut left_edge_max: f64 = 0.0;
    let mut sup_norm: f64 = 0.0;
    let mut max_jump: f64 = 0.0;
    for vals in &zh.values {
        left_edge_max = vals.iter().take(3).fold(left_edge_max, |a, x| a.max(x.abs()));
        sup_norm = vals.iter().fold(sup_norm, |a, x| a.max(x.abs()));
        max_jump = vals.windows(2).fold(max_jump, |a, w| a.max((w[1] - w[0]).abs()));
    }
    ClassReport {
        left_edge_max,
        left_vanishing: left_edge_max <= left_tol,
        sup_norm,
        bounded: sup_norm.is_finite(),
        max_jump,
        window_only: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MreSolution {
    pub z_star: GridFunction,
    pub class: ClassReport,
}

/// `Z* = 𝕍 ∗ z` on the window of `z`.
pub fn solve_mre(k: &SemiMarkovKernel, pd: &PerronData, v: &GridMeasure, z: &GridFunction, exec: Exec) -> Result<MreSolution> {
    same_step(v.step, z.step)?;
    if z.m != v.m || k.dim() != v.m {
        return Err(Error::Invalid("state counts of kernel, measure and function differ".into()));
    }
    let (za, zb) = z.window();
    let (va, vb) = v.window;
    let tol = 1e-9 * z.step;
    if za < va - tol || zb > vb + tol {
        return Err(Error::WindowTooSmall(format!("function window [{za}, {zb}] exceeds measure window [{va}, {vb}]")));
    }
    if z.left_tail.iter().any(|&x| x != 0.0) {
        return Err(Error::WindowTooSmall("function does not vanish left of the window".into()));
    }
    let left_over = v.entries.iter().map(|g| g.overflow_left).fold(0.0, f64::max);
    if left_over > 0.0 && z.right_tail.iter().any(|&x| x != 0.0) {
        return Err(Error::WindowTooSmall("measure mass left of the window meets a nonzero right tail".into()));
    }
    let m = v.m;
    let n = z.len();
    let values = exec.map(m, |i| {
        let mut acc = vec![0.0; n];
        for j in 0..m {
            for (a, x) in acc.iter_mut().zip(apply_measure(v.get(i, j), z, j, z.start, n)) {
                *a += x;
            }
        }
        acc
    });
    let mut z_star = z.clone();
    z_star.values = values;
    for i in 0..m {
        z_star.left_tail[i] = 0.0;
        z_star.right_tail[i] = *z_star.values[i].last().unwrap_or(&0.0);
    }
    z_star.left_decay = TailDecay::Zero;
    z_star.right_decay = TailDecay::Unknown;
    let tol = 10.0 * v.report.residual_bound.max(1e-12) * z.values.iter().flatten().fold(1.0f64, |a, x| a.max(x.abs()));
    let class = class_report(&z_star, pd, tol.max(1e-6));
    Ok(MreSolution { z_star, class })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub per_state: Vec<f64>,
    pub global: f64,
    /// Range of cells over which the sup was taken.
    pub interior: (f64, f64),
}

impl ResidualReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = self.per_state.iter().enumerate().map(|(i, r)| vec![(i + 1).to_string(), fmt_num(*r)]);
        write_table(out, &["state", "residual"], rows)
    }
}

fn interior_cells(k: &SemiMarkovKernel, z: &GridFunction) -> (usize, usize) {
    let skip = (k.negative_reach() / z.step).ceil() as usize;
    (0, z.len().saturating_sub(skip))
}

/// Sup-norm of `Z − z − K ∗ Z` over the window interior (cells whose
/// convolution does not reach past the right end). With `z = None` this is the
/// homogeneous residual.
pub fn residual(zz: &GridFunction, z: Option<&GridFunction>, k: &SemiMarkovKernel, exec: Exec) -> Result<ResidualReport> {
    if let Some(z) = z {
        zz.check_same_grid(z)?;
    }
    let kz = kernel_apply(k, zz, exec)?;
    let (lo, hi) = interior_cells(k, zz);
    let mut per_state = Vec::with_capacity(zz.m);
    for i in 0..zz.m {
        let mut worst: f64 = 0.0;
        for n in lo..hi {
            let zi = z.map_or(0.0, |z| z.values[i][n]);
            worst = worst.max((zz.values[i][n] - zi - kz.values[i][n]).abs());
        }
        per_state.push(worst);
    }
    let global = per_state.iter().copied().fold(0.0, f64::max);
    Ok(ResidualReport { per_state, global, interior: (zz.cell_left(lo), zz.cell_left(hi)) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CenterMode {
    /// `π`-weighted least squares of `Ẑ = D⁻¹Z` against constants.
    LeastSquares,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub c: f64,
    /// Interior sup of `|Δ_k|` for `k = 0..=n_iter`.
    pub trace: Vec<f64>,
    pub homogeneous_residual: f64,
}

/// Iterates `Δ_{k+1} = (P⊗F) ∗ Δ_k` from `Δ_0 = D⁻¹Z − c`.
pub fn homogeneous_probe(
    zz: &GridFunction,
    k: &SemiMarkovKernel,
    pd: &PerronData,
    n_iter: usize,
    center: CenterMode,
    exec: Exec,
) -> Result<ProbeReport> {
    let homogeneous_residual = residual(zz, None, k, exec)?.global;
    let kp = match k.form {
        KernelForm::Q => k.harmonic(pd)?,
        KernelForm::P => k.clone(),
    };
    let v: Vec<f64> = pd.v.iter().copied().collect();
    let zh = match k.form {
        KernelForm::Q => zz.divide(&v),
        KernelForm::P => zz.clone(),
    };
    let c = match center {
        CenterMode::Fixed(c) => c,
        CenterMode::LeastSquares => {
            let n = zh.len() as f64;
            (0..zh.m).map(|i| pd.pi[i] * zh.values[i].iter().sum::<f64>() / n).sum::<f64>() / pd.pi.sum()
        }
    };
    let ones = vec![1.0; zh.m];
    let mut delta = zh.add_constant(&ones, -c);
    let (lo, hi) = interior_cells(&kp, &delta);
    let sup = |d: &GridFunction| d.values.iter().map(|vals| vals[lo..hi].iter().fold(0.0f64, |a, x| a.max(x.abs()))).fold(0.0, f64::max);
    let mut trace = vec![sup(&delta)];
    for _ in 0..n_iter {
        delta = kernel_apply(&kp, &delta, exec)?;
        trace.push(sup(&delta));
    }
    Ok(ProbeReport { c, trace, homogeneous_residual })
}

/// `(v_i / μ) Σ_j u_j ∫ z_j`.
pub fn asymptotic_limit(z: &GridFunction, pd: &PerronData, stats: &KernelStats) -> Vec<f64> {
    let ints = z.integrals();
    let s: f64 = ints.iter().enumerate().map(|(j, x)| pd.u[j] * x).sum();
    (0..z.m).map(|i| pd.v[i] / stats.mu * s).collect()
}

/// Mean of `Z_i` over the rightmost `fraction` of the window.
pub fn right_edge_mean(z: &GridFunction, fraction: f64) -> Vec<f64> {
    let n = z.len();
    let e = ((n as f64 * fraction).round() as usize).clamp(1, n.max(1));
    z.values.iter().map(|v| v[n - e..].iter().sum::<f64>() / e as f64).collect()
}

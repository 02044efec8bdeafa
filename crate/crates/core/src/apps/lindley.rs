//! Tail of the supremum `W = sup_n S_n` of a Markov random walk with negative
//! drift under a Cramér-type condition `ρ(P_λ) = 1`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::apps::root::{convex_positive_root, RootOptions, RootReport};
use crate::apps::{fit_line, LineFit};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernel::{dist_stats, drift, SemiMarkovKernel};
use crate::perron::{closed_classes, perron_pair, QSMatrix, DEFAULT_TOL};
use crate::report::{fmt_num, write_table};
use crate::simulate::{rng_for, tilted_kernel, Estimate, TiltedKernel, Walker};

/// `P_λ = (p_ij φ_ij(λ))`. Underflowed entries are kept at the smallest
/// positive double so the pattern stays irreducible.
pub fn tilt_matrix(k: &SemiMarkovKernel, lambda: f64) -> Result<QSMatrix> {
    let m = k.dim();
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let p = k.weight(i, j);
            if p > 0.0 {
                let phi = dist_stats(k.dist(i, j), Some(lambda))?.mgf.unwrap_or(f64::NAN);
                if !phi.is_finite() {
                    return Err(Error::DivergentMoment { lambda });
                }
                a[(i, j)] = (p * phi).max(f64::MIN_POSITIVE);
            }
        }
    }
    QSMatrix::new(a)
}

/// Stationary drift of a stochastic kernel `P⊗G` (probability normalized).
pub fn probability_drift(k: &SemiMarkovKernel) -> Result<f64> {
    let pd = perron_pair(&k.weights, DEFAULT_TOL)?;
    Ok(drift(k, &pd)?.0)
}

/// `λ > 0` with `ρ(P_λ) = 1`; requires negative drift.
pub fn find_tilt_root(k: &SemiMarkovKernel, bracket: (f64, f64), opts: &RootOptions) -> Result<RootReport> {
    let mu = probability_drift(k)?;
    if !(mu < 0.0) {
        return Err(Error::NonNegativeDriftRequired { mu });
    }
    let rho = |l: f64| -> Result<f64> { Ok(perron_pair(&tilt_matrix(k, l)?, DEFAULT_TOL * 1e-3)?.rho) };
    convex_positive_root(&rho, bracket, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LindleyOptions {
    pub bracket: (f64, f64),
    pub t_grid: Vec<f64>,
    /// Paths per start state.
    pub n_paths: usize,
    pub seed: u64,
    /// A path is stopped once `S_n < max_{k<=n} S_k − margin_factor / λ`.
    pub margin_factor: f64,
    /// Tail points with fewer exceedances are left out of the slope fit.
    pub min_exceedances: usize,
    pub max_steps: usize,
    pub root: RootOptions,
    pub exec: Exec,
}

impl Default for LindleyOptions {
    fn default() -> Self {
        Self {
            bracket: (0.0, 1.0),
            t_grid: (0..=20).map(|k| 0.25 * k as f64).collect(),
            n_paths: 100_000,
            seed: 1,
            margin_factor: 30.0,
            min_exceedances: 100,
            max_steps: 10_000_000,
            root: RootOptions::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailRow {
    pub t: f64,
    pub tail: Estimate,
    pub exceedances: usize,
    /// `e^{λt} P(W > t)` and its 95% band.
    pub compensated: f64,
    pub band: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTail {
    pub state: usize,
    pub rows: Vec<TailRow>,
    /// Fit of `log P(W > t)` against `t`.
    pub fit: Option<LineFit>,
    pub prefactor: Option<f64>,
    /// `P_i(σ^> < ∞)`.
    pub ascent: Estimate,
    /// `q̂^>_ij = E_i 1{σ^> < ∞, M_{σ^>} = j} e^{λ S_{σ^>}}`.
    pub ladder_row: Vec<Estimate>,
    /// `Σ_j q̂^>_ij v_j / v_i`, which should be 1.
    pub row_identity: Estimate,
    /// `E_i e^{λ S_{σ(i)}}`, which should be 1.
    pub tilt_identity: Estimate,
    /// Paths stopped by the step cap.
    pub censored: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LindleyReport {
    /// Probability-normalized stationary drift of the base walk.
    pub drift: f64,
    /// `None` when increments are nonpositive and `W = 0` a.s.
    pub root: Option<RootReport>,
    pub tilted: Option<TiltedKernel>,
    pub states: Vec<StateTail>,
    /// Closed classes of the estimated ladder chain.
    pub ladder_classes: Vec<Vec<usize>>,
}

impl LindleyReport {
    pub fn lambda(&self) -> Option<f64> {
        self.root.map(|r| r.root)
    }

    /// Rows `(state, t, tail, std_error, compensated, band_lo, band_hi,
    /// fitted_slope, slope_se)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows = Vec::new();
        for s in &self.states {
            let (slope, se) = s.fit.map_or((String::new(), String::new()), |f| (fmt_num(f.slope), fmt_num(f.slope_se)));
            for r in &s.rows {
                rows.push(vec![
                    (s.state + 1).to_string(),
                    fmt_num(r.t),
                    fmt_num(r.tail.mean),
                    fmt_num(r.tail.se),
                    fmt_num(r.compensated),
                    fmt_num(r.band.0),
                    fmt_num(r.band.1),
                    slope.clone(),
                    se.clone(),
                ]);
            }
        }
        write_table(out, &["state", "t", "tail", "std_error", "compensated", "band_lo", "band_hi", "fitted_slope", "slope_se"], rows)
    }
}

struct PathOutcome {
    sup: f64,
    ladder: Option<(usize, f64)>,
    cycle: Option<f64>,
    censored: bool,
}

fn run(w: &Walker, i: usize, margin: f64, max_steps: usize, seed: u64, stream: u64) -> PathOutcome {
    let mut rng = rng_for(seed, stream);
    let (mut state, mut s, mut sup) = (i, 0.0f64, 0.0f64);
    let mut ladder = None;
    let mut cycle = None;
    let mut stopped = false;
    for _ in 0..max_steps {
        let (j, x) = w.step(&mut rng, state);
        state = j;
        s += x;
        if !stopped {
            if s > sup {
                if ladder.is_none() {
                    ladder = Some((j, s));
                }
                sup = s;
            }
            stopped = s < sup - margin;
        }
        if cycle.is_none() && j == i {
            cycle = Some(s);
        }
        if stopped && cycle.is_some() {
            return PathOutcome { sup, ladder, cycle, censored: false };
        }
    }
    PathOutcome { sup, ladder, cycle, censored: true }
}

fn empty_tail(i: usize, m: usize, t_grid: &[f64]) -> StateTail {
    let zero = Estimate { mean: 0.0, se: 0.0 };
    StateTail {
        state: i,
        rows: t_grid.iter().map(|&t| TailRow { t, tail: zero, exceedances: 0, compensated: 0.0, band: (0.0, 0.0) }).collect(),
        fit: None,
        prefactor: None,
        ascent: zero,
        ladder_row: vec![zero; m],
        row_identity: Estimate { mean: f64::NAN, se: f64::NAN },
        tilt_identity: Estimate { mean: f64::NAN, se: f64::NAN },
        censored: 0,
    }
}

/// Simulates `W` from every start state and reports `P_i(W > t)` on the grid,
/// the compensated tail `e^{λt} P_i(W > t)`, a log-linear slope fit and
/// ladder diagnostics for the identity `Σ_j q^>_ij v_j = v_i`.
pub fn lindley_tail(k: &SemiMarkovKernel, opts: &LindleyOptions) -> Result<LindleyReport> {
    let m = k.dim();
    let walker = Walker::new(k)?;
    let mu = probability_drift(k)?;
    if k.positive_reach() <= 0.0 {
        return Ok(LindleyReport {
            drift: mu,
            root: None,
            tilted: None,
            states: (0..m).map(|i| empty_tail(i, m, &opts.t_grid)).collect(),
            ladder_classes: (0..m).map(|i| vec![i]).collect(),
        });
    }
    let root = find_tilt_root(k, opts.bracket, &opts.root)?;
    let lambda = root.root;
    let tilted = tilted_kernel(k, lambda)?;
    let v: DVector<f64> = tilted.perron.v.clone();
    let margin = opts.margin_factor / lambda;
    let mut states = Vec::with_capacity(m);
    let mut ladder_pattern = vec![Vec::new(); m];
    for i in 0..m {
        let base = (i * opts.n_paths) as u64;
        let outcomes = opts.exec.map(opts.n_paths, |r| run(&walker, i, margin, opts.max_steps, opts.seed, base + r as u64));
        let n = outcomes.len() as f64;
        let rows: Vec<TailRow> = opts
            .t_grid
            .iter()
            .map(|&t| {
                let c = outcomes.iter().filter(|o| o.sup > t).count();
                let p = c as f64 / n;
                let se = (p * (1.0 - p) / n).sqrt();
                let e = (lambda * t).exp();
                TailRow { t, tail: Estimate { mean: p, se }, exceedances: c, compensated: e * p, band: (e * (p - 1.96 * se).max(0.0), e * (p + 1.96 * se)) }
            })
            .collect();
        let used: Vec<&TailRow> = rows.iter().filter(|r| r.exceedances >= opts.min_exceedances.max(1)).collect();
        let fit = fit_line(
            &used.iter().map(|r| r.t).collect::<Vec<_>>(),
            &used.iter().map(|r| r.tail.mean.ln()).collect::<Vec<_>>(),
            &used.iter().map(|r| r.exceedances as f64).collect::<Vec<_>>(),
        );
        let ascent: Vec<f64> = outcomes.iter().map(|o| f64::from(u8::from(o.ladder.is_some()))).collect();
        let ladder_row: Vec<Estimate> = (0..m)
            .map(|j| {
                let xs: Vec<f64> = outcomes.iter().map(|o| o.ladder.filter(|l| l.0 == j).map_or(0.0, |l| (lambda * l.1).exp())).collect();
                Estimate::from_samples(&xs)
            })
            .collect();
        for (j, e) in ladder_row.iter().enumerate() {
            if e.mean > 0.0 {
                ladder_pattern[i].push(j);
            }
        }
        let identity: Vec<f64> = outcomes.iter().map(|o| o.ladder.map_or(0.0, |l| v[l.0] * (lambda * l.1).exp() / v[i])).collect();
        let tilt: Vec<f64> = outcomes.iter().filter_map(|o| o.cycle).map(|s| (lambda * s).exp()).collect();
        states.push(StateTail {
            state: i,
            fit,
            prefactor: fit.map(|f| f.intercept.exp()),
            rows,
            ascent: Estimate::from_samples(&ascent),
            ladder_row,
            row_identity: Estimate::from_samples(&identity),
            tilt_identity: Estimate::from_samples(&tilt),
            censored: outcomes.iter().filter(|o| o.censored).count(),
        });
    }
    Ok(LindleyReport { drift: mu, root: Some(root), tilted: Some(tilted), states, ladder_classes: closed_classes(&ladder_pattern) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::Family;

    fn single(f: Family) -> SemiMarkovKernel {
        SemiMarkovKernel::from_families(QSMatrix::from_rows(&[vec![1.0]]).unwrap(), &[Some(f)], 0.01).unwrap()
    }

    fn mm1() -> Family {
        Family::Mix(vec![(1.0 / 3.0, Family::Exp { rate: 2.0 }), (2.0 / 3.0, Family::Neg(Box::new(Family::Exp { rate: 1.0 })))])
    }

    #[test]
    fn queue_root() {
        let r = find_tilt_root(&single(mm1()), (0.0, 0.5), &RootOptions::default()).unwrap();
        assert!((r.root - 1.0).abs() < 1e-9, "{}", r.root);
    }

    #[test]
    fn constant_negative_has_no_root() {
        let k = single(Family::Point { x: -1.0 });
        let e = find_tilt_root(&k, (0.0, 1.0), &RootOptions::default()).unwrap_err();
        assert!(matches!(e, Error::NoRoot { .. }), "{e:?}");
        let rep = lindley_tail(&k, &LindleyOptions { n_paths: 10, ..Default::default() }).unwrap();
        assert!(rep.root.is_none());
        assert_eq!(rep.states[0].rows[0].tail.mean, 0.0);
    }

    #[test]
    fn positive_drift_rejected() {
        let e = find_tilt_root(&single(Family::Exp { rate: 1.0 }), (0.0, 1.0), &RootOptions::default()).unwrap_err();
        assert!(matches!(e, Error::NonNegativeDriftRequired { .. }));
    }

    #[test]
    fn queue_tail_small_sample() {
        let opts = LindleyOptions { n_paths: 20_000, seed: 7, ..Default::default() };
        let rep = lindley_tail(&single(mm1()), &opts).unwrap();
        let s = &rep.states[0];
        assert!(s.rows[0].tail.z_score(0.5) < 4.0, "{:?}", s.rows[0]);
        let f = s.fit.unwrap();
        assert!((f.slope + 1.0).abs() < 0.1, "{f:?}");
        assert!(s.ascent.z_score(0.5) < 4.0);
        assert_eq!(s.censored, 0);
    }

    #[test]
    fn ladder_row_identity_two_states() {
        let p = QSMatrix::from_rows(&[vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let fams = [
            Some(Family::Normal { mean: -0.5, sd: 1.0 }),
            Some(Family::Normal { mean: 0.2, sd: 0.5 }),
            Some(Family::Normal { mean: -1.0, sd: 1.5 }),
            Some(Family::Normal { mean: -0.2, sd: 0.7 }),
        ];
        let k = SemiMarkovKernel::from_families(p, &fams, 0.01).unwrap();
        let opts = LindleyOptions { n_paths: 20_000, seed: 11, ..Default::default() };
        let rep = lindley_tail(&k, &opts).unwrap();
        let t = rep.tilted.as_ref().unwrap();
        assert!((t.perron.rho - 1.0).abs() < 1e-10);
        for s in &rep.states {
            assert!(s.row_identity.z_score(1.0) < 3.5, "{:?}", s.row_identity);
            assert!(s.tilt_identity.z_score(1.0) < 3.5, "{:?}", s.tilt_identity);
            assert!(s.ascent.mean < 1.0);
        }
        assert_eq!(rep.ladder_classes, vec![vec![0, 1]]);
    }
}

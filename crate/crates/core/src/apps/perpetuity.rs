//! Stationary solution of `Y_n = A_n Y_{n−1} + B_n` with `A_n` a finite
//! stationary Markov chain on values in `(0, ∞)` and i.i.d. `B_n`.
//!
//! The tail exponent `α > 0` solves `ρ((s^α p̂_ss′)) = 1`, `p̂` the transition
//! matrix of the time-reversed chain.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::apps::root::{convex_positive_root, RootOptions, RootReport};
use crate::apps::{fit_line, LineFit};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::family::Family;
use crate::perron::{perron_pair, QSMatrix, DEFAULT_TOL};
use crate::report::{fmt_num, write_table};
use crate::simulate::{ks_two_sample, rng_for};

/// Samples drawn per random stream; fixing it makes results independent of
/// the thread count.
const CHUNK: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PerpetuityModel {
    /// State space of the `A` chain, a subset of `(0, ∞)`.
    pub values: Vec<f64>,
    /// Forward transition matrix of the `A` chain.
    pub p: DMatrix<f64>,
    pub b: Family,
}

/// Derived quantities of a validated model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainData {
    pub pi: DVector<f64>,
    /// `p̂_ss′ = π_s′ p_s′s / π_s`.
    pub p_hat: DMatrix<f64>,
    /// `E log A` under `π`.
    pub e_log_a: f64,
    /// `E log⁺|B|` (grid approximation).
    pub e_log_b_plus: f64,
}

impl PerpetuityModel {
    pub fn chain(&self) -> Result<ChainData> {
        let m = self.values.len();
        if m == 0 || self.p.nrows() != m || self.p.ncols() != m {
            return Err(Error::Invalid(format!("{m} values need an {m}x{m} transition matrix")));
        }
        if let Some(s) = self.values.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid(format!("value {} of the A chain must be positive", s + 1)));
        }
        for i in 0..m {
            let r: f64 = self.p.row(i).sum();
            if (r - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("row {} of the A-chain matrix sums to {r}", i + 1)));
            }
        }
        let pd = perron_pair(&QSMatrix::new(self.p.clone())?, DEFAULT_TOL)?;
        let pi = pd.u.clone();
        let p_hat = DMatrix::from_fn(m, m, |s, t| pi[t] * self.p[(t, s)] / pi[s]);
        let e_log_a: f64 = (0..m).map(|s| pi[s] * self.values[s].ln()).sum();
        let g = self.b.discretize(1e-3);
        let mut e_log_b_plus: f64 = g.atoms.iter().map(|&(x, w)| w * x.abs().ln().max(0.0)).sum();
        for (k, &c) in g.cells.iter().enumerate() {
            let mid = ((g.start + k as i64) as f64 + 0.5) * g.step;
            e_log_b_plus += c * mid.abs().ln().max(0.0);
        }
        if !(e_log_a < 0.0) {
            return Err(Error::Invalid(format!("E log A = {e_log_a} must be negative for a stationary solution")));
        }
        Ok(ChainData { pi, p_hat, e_log_a, e_log_b_plus })
    }

    /// `Q(α) = (s^α p̂_ss′)`.
    pub fn q_alpha(&self, p_hat: &DMatrix<f64>, alpha: f64) -> Result<QSMatrix> {
        let m = self.values.len();
        QSMatrix::new(DMatrix::from_fn(m, m, |s, t| {
            let x = self.values[s].powf(alpha) * p_hat[(s, t)];
            if p_hat[(s, t)] > 0.0 {
                x.max(f64::MIN_POSITIVE)
            } else {
                0.0
            }
        }))
    }
}

/// Inverse-CDF draw from a probability row.
fn draw<R: Rng + ?Sized>(rng: &mut R, cum: &[f64]) -> usize {
    let u = rng.random::<f64>() * cum[cum.len() - 1];
    cum.partition_point(|&c| c <= u).min(cum.len() - 1)
}

fn cumulative(row: impl Iterator<Item = f64>) -> Vec<f64> {
    row.scan(0.0, |acc, x| {
        *acc += x;
        Some(*acc)
    })
    .collect()
}

/// Samplers for the stationary law of `(A_0, Y_0)`.
#[derive(Debug, Clone)]
pub struct PerpetuitySampler {
    values: Vec<f64>,
    pi_cum: Vec<f64>,
    fwd: Vec<Vec<f64>>,
    bwd: Vec<Vec<f64>>,
    b: Family,
    /// Backward series stop once the running product drops below this.
    pub truncation: f64,
    pub max_terms: usize,
}

impl PerpetuitySampler {
    pub fn new(model: &PerpetuityModel, chain: &ChainData) -> Self {
        let m = model.values.len();
        Self {
            values: model.values.clone(),
            pi_cum: cumulative(chain.pi.iter().copied()),
            fwd: (0..m).map(|s| cumulative(model.p.row(s).iter().copied())).collect(),
            bwd: (0..m).map(|s| cumulative(chain.p_hat.row(s).iter().copied())).collect(),
            b: model.b.clone(),
            truncation: 1e-12,
            max_terms: 10_000_000,
        }
    }

    /// `(A_0 index, Y_0)` via `Y_0 = B_0 + Σ_{n≥0} A_{−n}⋯A_0 B_{−n−1}`.
    pub fn backward<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let s0 = draw(rng, &self.pi_cum);
        let mut y = self.b.sample(rng);
        let mut s = s0;
        let mut prod = 1.0;
        for _ in 0..self.max_terms {
            prod *= self.values[s];
            y += prod * self.b.sample(rng);
            if prod.abs() < self.truncation {
                break;
            }
            s = draw(rng, &self.bwd[s]);
        }
        (s0, y)
    }

    /// `(A_n index, Y_n)` after `burn_in` forward steps from `Y = 0` with the
    /// chain started in `π`.
    pub fn forward<R: Rng + ?Sized>(&self, rng: &mut R, burn_in: usize) -> (usize, f64) {
        let mut s = draw(rng, &self.pi_cum);
        let mut y = 0.0;
        for _ in 0..burn_in {
            s = draw(rng, &self.fwd[s]);
            y = self.values[s] * y + self.b.sample(rng);
        }
        (s, y)
    }
}

/// Draws `n` samples in fixed-size chunks, chunk `c` on stream `offset + c`.
fn sample_many(n: usize, seed: u64, offset: u64, exec: Exec, f: impl Fn(&mut rand_chacha::ChaCha8Rng) -> (usize, f64) + Sync) -> Vec<(usize, f64)> {
    let chunks = n.div_ceil(CHUNK);
    exec.map(chunks, |c| {
        let mut rng = rng_for(seed, offset + c as u64);
        let len = CHUNK.min(n - c * CHUNK);
        (0..len).map(|_| f(&mut rng)).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerpetuityOptions {
    pub bracket: (f64, f64),
    pub n_samples: usize,
    pub n_forward: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub truncation: f64,
    /// Tail probabilities bounding the slope fit range.
    pub tail_levels: (f64, f64),
    pub fit_points: usize,
    /// Points `t` (log scale) for the smoothed tail functions.
    pub smooth_grid: Vec<f64>,
    pub root: RootOptions,
    pub exec: Exec,
}

impl Default for PerpetuityOptions {
    fn default() -> Self {
        Self {
            bracket: (0.0, 1.0),
            n_samples: 1_000_000,
            n_forward: 20_000,
            burn_in: 1000,
            seed: 1,
            truncation: 1e-12,
            tail_levels: (1e-2, 1e-4),
            fit_points: 20,
            smooth_grid: (0..=16).map(|k| 0.5 * k as f64).collect(),
            root: RootOptions::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailFit {
    /// `(t, P(±Y > t), std error)`.
    pub rows: Vec<(f64, f64, f64)>,
    /// Fit of `log P(±Y > t)` against `log t`.
    pub fit: Option<LineFit>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedRow {
    pub state: usize,
    pub t: f64,
    pub plus: f64,
    pub minus: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerpetuityReport {
    pub chain: ChainData,
    pub root: RootReport,
    pub alpha: f64,
    /// `ρ(Q(α))` recomputed at the root.
    pub rho_at_alpha: f64,
    pub plus: TailFit,
    pub minus: TailFit,
    /// Two-sample Kolmogorov-Smirnov statistic and p-value, backward series
    /// against forward iteration.
    pub ks: (f64, f64),
    /// Empirical `Z_s^±(t) = (π_s e^t)^{−1} ∫_0^{e^t} u^α P(±sY > u, A = s) du`.
    pub smoothed: Vec<SmoothedRow>,
}

impl PerpetuityReport {
    /// Rows `(side, t, tail, std_error, compensated, fitted_slope, slope_se)`
    /// with `compensated = t^α P(±Y > t)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows = Vec::new();
        for (side, tf) in [("plus", &self.plus), ("minus", &self.minus)] {
            let (slope, se) = tf.fit.map_or((String::new(), String::new()), |f| (fmt_num(f.slope), fmt_num(f.slope_se)));
            for &(t, p, e) in &tf.rows {
                rows.push(vec![side.to_string(), fmt_num(t), fmt_num(p), fmt_num(e), fmt_num(t.powf(self.alpha) * p), slope.clone(), se.clone()]);
            }
        }
        write_table(out, &["side", "t", "tail", "std_error", "compensated", "fitted_slope", "slope_se"], rows)
    }

    pub fn write_smoothed_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = self.smoothed.iter().map(|r| vec![(r.state + 1).to_string(), fmt_num(r.t), fmt_num(r.plus), fmt_num(r.minus)]);
        write_table(out, &["state", "t", "z_plus", "z_minus"], rows)
    }
}

/// Fits the log-log tail slope of `P(Y > t)` between the quantiles at the two
/// tail levels, using `fit_points` log-spaced thresholds.
pub fn tail_fit(samples: &[f64], levels: (f64, f64), fit_points: usize) -> TailFit {
    let mut pos: Vec<f64> = samples.iter().copied().filter(|&x| x > 0.0).collect();
    pos.sort_by(|a, b| b.total_cmp(a));
    let n = samples.len() as f64;
    let k_lo = (levels.0 * n).floor() as usize;
    let k_hi = (levels.1 * n).floor() as usize;
    if k_hi < 10 || k_lo >= pos.len() || k_hi >= k_lo || fit_points < 2 {
        return TailFit { rows: Vec::new(), fit: None };
    }
    let (t0, t1) = (pos[k_lo].ln(), pos[k_hi].ln());
    let rows: Vec<(f64, f64, f64)> = (0..fit_points)
        .map(|k| {
            let t = (t0 + (t1 - t0) * k as f64 / (fit_points - 1) as f64).exp();
            let c = pos.partition_point(|&x| x > t);
            let p = c as f64 / n;
            (t, p, (p * (1.0 - p) / n).sqrt())
        })
        .collect();
    let used: Vec<&(f64, f64, f64)> = rows.iter().filter(|r| r.1 > 0.0).collect();
    let fit = fit_line(
        &used.iter().map(|r| r.0.ln()).collect::<Vec<_>>(),
        &used.iter().map(|r| r.1.ln()).collect::<Vec<_>>(),
        &used.iter().map(|r| r.1 * n).collect::<Vec<_>>(),
    );
    TailFit { rows, fit }
}

/// Tail exponent, simulated tails and smoothed tail functions of the
/// perpetuity.
pub fn perpetuity(model: &PerpetuityModel, opts: &PerpetuityOptions) -> Result<PerpetuityReport> {
    let chain = model.chain()?;
    let rho = |a: f64| -> Result<f64> { Ok(perron_pair(&model.q_alpha(&chain.p_hat, a)?, DEFAULT_TOL * 1e-3)?.rho) };
    let root = convex_positive_root(&rho, opts.bracket, &opts.root)?;
    let alpha = root.root;
    let rho_at_alpha = rho(alpha)?;
    let mut sampler = PerpetuitySampler::new(model, &chain);
    sampler.truncation = opts.truncation;
    let back = sample_many(opts.n_samples, opts.seed, 0, opts.exec, |r| sampler.backward(r));
    let offset = opts.n_samples.div_ceil(CHUNK) as u64;
    let fwd = sample_many(opts.n_forward, opts.seed, offset, opts.exec, |r| sampler.forward(r, opts.burn_in));
    let ys: Vec<f64> = back.iter().map(|s| s.1).collect();
    let neg: Vec<f64> = ys.iter().map(|y| -y).collect();
    let k = opts.n_forward.min(ys.len());
    let ks = ks_two_sample(&ys[..k], &fwd.iter().map(|s| s.1).collect::<Vec<_>>());
    let n = ys.len() as f64;
    let mut smoothed = Vec::new();
    for (s, &a) in model.values.iter().enumerate() {
        for &t in &opts.smooth_grid {
            let e = t.exp();
            let side = |sign: f64| -> f64 {
                let acc: f64 = back.iter().filter(|x| x.0 == s).map(|x| (sign * a * x.1).clamp(0.0, e).powf(alpha + 1.0)).sum();
                acc / (alpha + 1.0) / n / (chain.pi[s] * e)
            };
            smoothed.push(SmoothedRow { state: s, t, plus: side(1.0), minus: side(-1.0) });
        }
    }
    Ok(PerpetuityReport {
        plus: tail_fit(&ys, opts.tail_levels, opts.fit_points),
        minus: tail_fit(&neg, opts.tail_levels, opts.fit_points),
        chain,
        root,
        alpha,
        rho_at_alpha,
        ks,
        smoothed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(p: [f64; 4]) -> PerpetuityModel {
        PerpetuityModel { values: vec![0.5, 1.5], p: DMatrix::from_row_slice(2, 2, &p), b: Family::Point { x: 1.0 } }
    }

    #[test]
    fn equal_rows_alpha_one() {
        let m = model([0.5, 0.5, 0.5, 0.5]);
        let c = m.chain().unwrap();
        let rho = |a: f64| -> Result<f64> { Ok(perron_pair(&m.q_alpha(&c.p_hat, a)?, 1e-13)?.rho) };
        let r = convex_positive_root(&rho, (0.0, 0.3), &RootOptions::default()).unwrap();
        assert!((r.root - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sticky_chain_root_consistent() {
        let m = model([0.9, 0.1, 0.1, 0.9]);
        let c = m.chain().unwrap();
        assert!((c.p_hat[(0, 0)] - 0.9).abs() < 1e-12);
        let rho = |a: f64| -> Result<f64> { Ok(perron_pair(&m.q_alpha(&c.p_hat, a)?, 1e-13)?.rho) };
        let r = convex_positive_root(&rho, (0.0, 1.0), &RootOptions::default()).unwrap();
        assert!((rho(r.root).unwrap() - 1.0).abs() < 1e-10);
        // the 2x2 spectral radius in closed form
        let a = r.root;
        let (x, y) = (0.9 * 0.5f64.powf(a), 0.9 * 1.5f64.powf(a));
        let (b, d) = (0.1 * 0.5f64.powf(a), 0.1 * 1.5f64.powf(a));
        let closed = 0.5 * (x + y + ((x - y).powi(2) + 4.0 * b * d).sqrt());
        assert!((closed - 1.0).abs() < 1e-10);
        assert!(a < 1.0);
    }

    #[test]
    fn contraction_has_no_root_and_degenerate_law() {
        let m = PerpetuityModel { values: vec![0.5], p: DMatrix::from_element(1, 1, 1.0), b: Family::Point { x: 1.0 } };
        let opts = PerpetuityOptions { n_samples: 100, n_forward: 100, root: RootOptions { max_expansions: 20, ..Default::default() }, ..Default::default() };
        assert!(matches!(perpetuity(&m, &opts), Err(Error::NoRoot { .. })));
        let c = m.chain().unwrap();
        let s = PerpetuitySampler::new(&m, &c);
        let (_, y) = s.backward(&mut rng_for(1, 0));
        assert!((y - 2.0).abs() < 1e-11);
    }

    #[test]
    fn expanding_chain_rejected() {
        let m = PerpetuityModel { values: vec![2.0], p: DMatrix::from_element(1, 1, 1.0), b: Family::Point { x: 1.0 } };
        assert!(matches!(m.chain(), Err(Error::Invalid(_))));
    }

    #[test]
    fn small_run_agrees() {
        let m = model([0.5, 0.5, 0.5, 0.5]);
        let opts = PerpetuityOptions { n_samples: 50_000, n_forward: 5_000, tail_levels: (1e-2, 1e-3), ..Default::default() };
        let r = perpetuity(&m, &opts).unwrap();
        assert!(r.ks.1 > 0.01, "{:?}", r.ks);
        assert!(r.minus.fit.is_none());
        let f = r.plus.fit.unwrap();
        assert!((f.slope + 1.0).abs() < 0.3, "{f:?}");
    }
}

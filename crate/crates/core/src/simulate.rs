//! Monte Carlo for Markov random walks `(M_n, S_n)`: paths, return cycles,
//! regeneration estimators, empirical renewal measures, ladder epochs and
//! exponential tilting.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::family::Family;
use crate::grid::GridMass;
use crate::kernel::{dist_stats, Dist, KernelForm, SemiMarkovKernel};
use crate::perron::{perron_pair, PerronData, QSMatrix, DEFAULT_TOL};
use crate::report::{fmt_num, write_table};

/// Generator for replicate `stream` of a run seeded with `master`.
pub fn rng_for(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
enum IncrementSampler {
    Family(Family),
    /// Inverse CDF over atoms and cells (uniform within cells).
    Grid { points: Vec<(f64, f64, bool)>, cdf: Vec<f64>, step: f64 },
}

impl IncrementSampler {
    fn new(d: &Dist) -> Self {
        if let Some(f) = &d.family {
            return IncrementSampler::Family(f.clone());
        }
        let g = &d.mass;
        let mut points = Vec::new();
        for &(x, w) in &g.atoms {
            points.push((x, w, true));
        }
        for (idx, &c) in g.cells.iter().enumerate() {
            if c > 0.0 {
                points.push(((g.start + idx as i64) as f64 * g.step, c, false));
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cdf = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        for p in &points {
            acc += p.1;
            cdf.push(acc);
        }
        IncrementSampler::Grid { points, cdf, step: g.step }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            IncrementSampler::Family(f) => f.sample(rng),
            IncrementSampler::Grid { points, cdf, step } => {
                let total = *cdf.last().expect("nonempty law");
                let u = rng.random::<f64>() * total;
                let k = cdf.partition_point(|&c| c <= u).min(points.len() - 1);
                let (x, _, atom) = points[k];
                if atom {
                    x
                } else {
                    x + step * rng.random::<f64>()
                }
            }
        }
    }
}

/// Transition-and-increment sampler for a kernel with stochastic weights.
#[derive(Debug, Clone)]
pub struct Walker {
    m: usize,
    cum: Vec<Vec<(usize, f64)>>,
    samplers: Vec<Option<IncrementSampler>>,
}

impl Walker {
    pub fn new(k: &SemiMarkovKernel) -> Result<Self> {
        let m = k.dim();
        let mut cum = Vec::with_capacity(m);
        let mut samplers = Vec::with_capacity(m * m);
        for i in 0..m {
            let row: f64 = (0..m).map(|j| k.weight(i, j)).sum();
            if (row - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("row {} of the transition matrix sums to {row}", i + 1)));
            }
            let mut acc = 0.0;
            let mut r = Vec::new();
            for j in 0..m {
                let w = k.weight(i, j);
                if w > 0.0 {
                    acc += w;
                    r.push((j, acc));
                    samplers.push(Some(IncrementSampler::new(k.dist(i, j))));
                } else {
                    samplers.push(None);
                }
            }
            cum.push(r);
        }
        Ok(Self { m, cum, samplers })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    /// One transition from `state`: `(next state, increment)`.
    pub fn step<R: Rng + ?Sized>(&self, rng: &mut R, state: usize) -> (usize, f64) {
        let row = &self.cum[state];
        let u = rng.random::<f64>() * row.last().expect("row has an edge").1;
        let j = row.iter().find(|e| u < e.1).unwrap_or(row.last().unwrap()).0;
        let x = self.samplers[state * self.m + j].as_ref().expect("edge sampler").sample(rng);
        (j, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub seed: u64,
    pub states: Vec<usize>,
    /// `increments[n-1] = X_n`.
    pub increments: Vec<f64>,
    /// `partial_sums[0] = 0`.
    pub partial_sums: Vec<f64>,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// Rows `(n, M_n, X_n, S_n)` with 1-based states and `X_0 = 0`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows = (0..self.states.len()).map(|n| {
            vec![
                n.to_string(),
                (self.states[n] + 1).to_string(),
                fmt_num(if n == 0 { 0.0 } else { self.increments[n - 1] }),
                fmt_num(self.partial_sums[n]),
            ]
        });
        write_table(out, &["n", "state", "increment", "partial_sum"], rows)
    }
}

fn run_path<R: Rng + ?Sized>(w: &Walker, rng: &mut R, i0: usize, n_steps: usize, seed: u64) -> PathRecord {
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut increments = Vec::with_capacity(n_steps);
    let mut partial_sums = Vec::with_capacity(n_steps + 1);
    states.push(i0);
    partial_sums.push(0.0);
    let mut s = 0.0;
    let mut state = i0;
    for _ in 0..n_steps {
        let (j, x) = w.step(rng, state);
        s += x;
        state = j;
        states.push(j);
        increments.push(x);
        partial_sums.push(s);
    }
    PathRecord { seed, states, increments, partial_sums }
}

/// One path of `n_steps` transitions from `i0`; the first stream of `seed`.
pub fn sample_path(w: &Walker, i0: usize, n_steps: usize, seed: u64) -> PathRecord {
    run_path(w, &mut rng_for(seed, 0), i0, n_steps, seed)
}

/// `n_paths` independent paths; replicate `r` uses stream `r` of `master`.
pub fn sample_paths(w: &Walker, i0: usize, n_steps: usize, master: u64, n_paths: usize, exec: Exec) -> Vec<PathRecord> {
    exec.map(n_paths, |r| run_path(w, &mut rng_for(master, r as u64), i0, n_steps, master))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cycle {
    pub epoch: usize,
    pub value: f64,
}

/// Successive return epochs `σ_n(i)` and `S_{σ_n(i)}`.
pub fn return_cycles(path: &PathRecord, i: usize) -> Result<Vec<Cycle>> {
    if path.states.first() != Some(&i) {
        return Err(Error::Invalid(format!("path does not start in state {}", i + 1)));
    }
    let out: Vec<Cycle> = path
        .states
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &s)| s == i)
        .map(|(n, _)| Cycle { epoch: n, value: path.partial_sums[n] })
        .collect();
    if out.len() < 2 {
        return Err(Error::InsufficientVisits { state: i + 1, returns: out.len() });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, se: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, se: (var / n).sqrt() }
    }

    /// `|mean − target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.se > 0.0 {
            (self.mean - target).abs() / self.se
        } else if self.mean == target {
            0.0
        } else {
            (self.mean - target).abs() / f64::MIN_POSITIVE
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleEstimates {
    pub state: usize,
    pub n_cycles: usize,
    /// `E_i S_{σ(i)}`.
    pub cycle_drift: Estimate,
    /// `π^{(i)}_j = E_i Σ_{n=1}^{σ(i)} 1{M_n = j}`.
    pub occupation: Vec<Estimate>,
    /// `E_i Σ_{n=1}^{σ(i)} g(M_n, X_n)` when a functional was supplied.
    pub functional: Option<Estimate>,
    /// Cycle increments `S_{σ_k} − S_{σ_{k−1}}` in order.
    pub cycle_sums: Vec<f64>,
}

impl CycleEstimates {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows = vec![vec!["cycle_drift".into(), String::new(), fmt_num(self.cycle_drift.mean), fmt_num(self.cycle_drift.se)]];
        for (j, e) in self.occupation.iter().enumerate() {
            rows.push(vec!["occupation".into(), (j + 1).to_string(), fmt_num(e.mean), fmt_num(e.se)]);
        }
        if let Some(f) = self.functional {
            rows.push(vec!["functional".into(), String::new(), fmt_num(f.mean), fmt_num(f.se)]);
        }
        write_table(out, &["quantity", "state", "estimate", "std_error"], rows)
    }
}

/// Regeneration estimators from complete cycles of paths started in `i`.
pub fn cycle_estimators(paths: &[PathRecord], i: usize, m: usize, g: Option<&dyn Fn(usize, f64) -> f64>) -> Result<CycleEstimates> {
    let mut sums = Vec::new();
    let mut occ: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut fun = Vec::new();
    for p in paths {
        let cycles = return_cycles(p, i)?;
        let mut prev = 0usize;
        for c in cycles {
            sums.push(c.value - p.partial_sums[prev]);
            let mut counts = vec![0.0; m];
            let mut acc = 0.0;
            for n in prev + 1..=c.epoch {
                counts[p.states[n]] += 1.0;
                if let Some(g) = g {
                    acc += g(p.states[n], p.increments[n - 1]);
                }
            }
            for (o, c) in occ.iter_mut().zip(counts) {
                o.push(c);
            }
            fun.push(acc);
            prev = c.epoch;
        }
    }
    Ok(CycleEstimates {
        state: i,
        n_cycles: sums.len(),
        cycle_drift: Estimate::from_samples(&sums),
        occupation: occ.iter().map(|o| Estimate::from_samples(o)).collect(),
        functional: g.map(|_| Estimate::from_samples(&fun)),
        cycle_sums: sums,
    })
}

/// Monte Carlo estimate of row `i` of the Markov renewal measure: cellwise
/// expected visit counts with standard errors across replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub state: usize,
    pub step: f64,
    /// Grid index of the first cell.
    pub start: i64,
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub replicates: usize,
    /// Replicates stopped by the step cap before leaving the window.
    pub censored: usize,
}

impl EmpiricalMeasure {
    pub fn len(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Estimated mass of the cells covering `[t, t+h)` with its standard
    /// error (cells summed, so `t` and `h` should be grid aligned).
    pub fn slab(&self, j: usize, t: f64, h: f64, per_replicate: &[Vec<Vec<f64>>]) -> Estimate {
        let k0 = ((t / self.step).round() as i64 - self.start).max(0) as usize;
        let k1 = (((t + h) / self.step).round() as i64 - self.start).clamp(0, self.len() as i64) as usize;
        let xs: Vec<f64> = per_replicate.iter().map(|r| r[j][k0..k1].iter().sum()).collect();
        Estimate::from_samples(&xs)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut rows = Vec::new();
        for (j, (m, s)) in self.mean.iter().zip(&self.se).enumerate() {
            for (n, (a, b)) in m.iter().zip(s).enumerate() {
                let l = (self.start + n as i64) as f64 * self.step;
                rows.push(vec![(self.state + 1).to_string(), (j + 1).to_string(), fmt_num(l), fmt_num(l + self.step), fmt_num(*a), fmt_num(*b)]);
            }
        }
        write_table(out, &["i", "j", "cell_left", "cell_right", "mass", "std_error"], rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmpiricalOptions {
    pub replicates: usize,
    pub master_seed: u64,
    /// Walks are stopped once `S_n > b + exit_margin`.
    pub exit_margin: f64,
    pub max_steps: usize,
    pub exec: Exec,
}

/// Per-replicate cell counts (state × cell) on the window.
pub fn empirical_counts(w: &Walker, i: usize, window: (f64, f64), step: f64, opts: &EmpiricalOptions) -> (i64, Vec<Vec<Vec<f64>>>, usize) {
    let k0 = (window.0 / step + 1e-9).floor() as i64;
    let k1 = (window.1 / step - 1e-9).ceil() as i64;
    let n = (k1 - k0) as usize;
    let runs = opts.exec.map(opts.replicates, |r| {
        let mut rng = rng_for(opts.master_seed, r as u64);
        let mut counts = vec![vec![0.0; n]; w.dim()];
        let (mut state, mut s) = (i, 0.0);
        let mut steps = 0usize;
        let mut censored = false;
        loop {
            let k = (s / step).floor() as i64;
            if k >= k0 && k < k1 {
                counts[state][(k - k0) as usize] += 1.0;
            }
            if s > window.1 + opts.exit_margin {
                break;
            }
            if steps == opts.max_steps {
                censored = true;
                break;
            }
            let (j, x) = w.step(&mut rng, state);
            state = j;
            s += x;
            steps += 1;
        }
        (counts, censored)
    });
    let censored = runs.iter().filter(|r| r.1).count();
    (k0, runs.into_iter().map(|r| r.0).collect(), censored)
}

/// Empirical row `i` of `𝕌` from walks started in `i`.
pub fn empirical_renewal(w: &Walker, i: usize, window: (f64, f64), step: f64, opts: &EmpiricalOptions) -> (EmpiricalMeasure, Vec<Vec<Vec<f64>>>) {
    let (start, runs, censored) = empirical_counts(w, i, window, step, opts);
    let m = w.dim();
    let n = runs.first().map_or(0, |r| r[0].len());
    let mut mean = vec![vec![0.0; n]; m];
    let mut se = vec![vec![0.0; n]; m];
    for j in 0..m {
        for c in 0..n {
            let xs: Vec<f64> = runs.iter().map(|r| r[j][c]).collect();
            let e = Estimate::from_samples(&xs);
            mean[j][c] = e.mean;
            se[j][c] = e.se;
        }
    }
    (EmpiricalMeasure { state: i, step, start, mean, se, replicates: runs.len(), censored }, runs)
}

/// Mass per grid cell with atoms assigned to the cell containing them, the
/// convention of the empirical counts.
pub fn cell_masses(g: &GridMass, start: i64, n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..n).map(|c| g.cell(start + c as i64)).collect();
    for &(x, w) in &g.atoms {
        let k = (x / g.step + 1e-9).floor() as i64 - start;
        if k >= 0 && (k as usize) < n {
            out[k as usize] += w;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderPoint {
    pub epoch: usize,
    pub height: f64,
    pub state: usize,
}

/// Strictly ascending ladder epochs `σ^>_n` with heights and states.
pub fn ladder_epochs(path: &PathRecord) -> Vec<LadderPoint> {
    let mut out = Vec::new();
    let mut level = 0.0;
    for n in 1..path.partial_sums.len() {
        if path.partial_sums[n] > level {
            level = path.partial_sums[n];
            out.push(LadderPoint { epoch: n, height: level, state: path.states[n] });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltedKernel {
    pub lambda: f64,
    /// `φ_ij(λ)` (zero where `p_ij = 0`).
    pub phi: DMatrix<f64>,
    /// `Q_λ = (p_ij φ_ij(λ))`.
    pub q_lambda: QSMatrix,
    pub perron: PerronData,
    /// Stochastic kernel `D⁻¹Q_λD / ρ` with laws `e^{λx} G_ij(dx) / φ_ij(λ)`.
    pub kernel: SemiMarkovKernel,
}

fn tilt_dist(d: &Dist, lambda: f64, step: f64) -> Result<(Dist, f64)> {
    if let Some(f) = &d.family {
        let (t, phi) = f.tilt(lambda)?;
        return Ok((Dist::from_family(t, step), phi));
    }
    let phi = dist_stats(d, Some(lambda))?.mgf.unwrap_or(f64::NAN);
    let mut g = d.mass.clone();
    for a in g.atoms.iter_mut() {
        a.1 *= (lambda * a.0).exp() / phi;
    }
    let lr = lambda * step;
    let e = if lr.abs() < 1e-12 { 1.0 } else { lr.exp_m1() / lr };
    for (idx, c) in g.cells.iter_mut().enumerate() {
        let left = (g.start + idx as i64) as f64 * step;
        *c *= (lambda * left).exp() * e / phi;
    }
    g.overflow_left = 0.0;
    g.overflow_right = 0.0;
    Ok((Dist::from_mass(g), phi))
}

/// Exponential change of measure of a stochastic kernel `P⊗G` at `λ`.
pub fn tilted_kernel(k: &SemiMarkovKernel, lambda: f64) -> Result<TiltedKernel> {
    let m = k.dim();
    let mut phi = DMatrix::zeros(m, m);
    let mut dists = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            if k.weight(i, j) > 0.0 {
                let (d, p) = tilt_dist(k.dist(i, j), lambda, k.step)?;
                phi[(i, j)] = p;
                dists.push(d);
            } else {
                dists.push(Dist::zero(k.step));
            }
        }
    }
    let q = QSMatrix::new(DMatrix::from_fn(m, m, |i, j| k.weight(i, j) * phi[(i, j)]))?;
    let pd = perron_pair(&q, DEFAULT_TOL)?;
    let p = DMatrix::from_fn(m, m, |i, j| q.get(i, j) * pd.v[j] / (pd.v[i] * pd.rho));
    let mut kernel = SemiMarkovKernel::new(QSMatrix::new(p)?, dists, k.step)?;
    kernel.form = KernelForm::P;
    Ok(TiltedKernel { lambda, phi, q_lambda: q, perron: pd, kernel })
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = x[i].min(y[j]);
        while i < n && x[i] <= t {
            i += 1;
        }
        while j < m && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lam = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lam))
}

fn kolmogorov_q(lam: f64) -> f64 {
    if lam < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = 2.0 * if k % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * (k * k) as f64 * lam * lam).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn alternating(x: Family) -> SemiMarkovKernel {
        let q = QSMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        SemiMarkovKernel::from_families(q, &[None, Some(x.clone()), Some(x), None], 0.01).unwrap()
    }

    #[test]
    fn deterministic_paths() {
        let w = Walker::new(&alternating(Family::Point { x: 1.0 })).unwrap();
        let p = sample_path(&w, 0, 10, 3);
        assert_eq!(p.states, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0]);
        assert_eq!(p.partial_sums, (0..=10).map(|n| n as f64).collect::<Vec<_>>());
        let c = return_cycles(&p, 0).unwrap();
        assert_eq!(c.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![2, 4, 6, 8, 10]);
        let l = ladder_epochs(&p);
        assert_eq!(l.iter().map(|l| l.epoch).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn reproducible_and_distinct_streams() {
        let w = Walker::new(&alternating(Family::Exp { rate: 1.0 })).unwrap();
        assert_eq!(sample_path(&w, 0, 50, 9), sample_path(&w, 0, 50, 9));
        let a = sample_paths(&w, 0, 50, 9, 4, Exec::Parallel);
        let b = sample_paths(&w, 0, 50, 9, 4, Exec::Sequential);
        assert_eq!(a, b);
        assert_ne!(a[0].increments, a[1].increments);
    }

    #[test]
    fn too_few_returns() {
        let w = Walker::new(&alternating(Family::Point { x: 1.0 })).unwrap();
        let p = sample_path(&w, 0, 3, 1);
        assert_eq!(return_cycles(&p, 0), Err(Error::InsufficientVisits { state: 1, returns: 1 }));
    }

    #[test]
    fn negative_path_has_no_ladder() {
        let w = Walker::new(&alternating(Family::Point { x: -0.5 })).unwrap();
        assert!(ladder_epochs(&sample_path(&w, 0, 20, 1)).is_empty());
    }

    #[test]
    fn tilt_identity() {
        let q = QSMatrix::from_rows(&[vec![1.0]]).unwrap();
        let g = Family::parse("mix(0.3333333333333333:exp(2),0.6666666666666667:neg(exp(1)))").unwrap();
        let k = SemiMarkovKernel::from_families(q, &[Some(g)], 0.01).unwrap();
        let t = tilted_kernel(&k, 1.0).unwrap();
        assert_abs_diff_eq!(t.q_lambda.get(0, 0), 1.0, epsilon = 1e-12);
        let t0 = tilted_kernel(&k, 0.0).unwrap();
        assert_abs_diff_eq!(t0.phi[(0, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(t0.kernel.dist(0, 0).family, k.dist(0, 0).family.as_ref().map(|f| f.tilt(0.0).unwrap().0));
    }

    #[test]
    fn grid_sampler_mean() {
        let d = Dist::from_mass(Family::Exp { rate: 2.0 }.discretize(0.01));
        let s = IncrementSampler::new(&d);
        let mut rng = rng_for(5, 0);
        let n = 100_000;
        let m = (0..n).map(|_| s.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.01, "{m}");
    }

    #[test]
    fn ks_detects_shift() {
        let mut rng = rng_for(1, 0);
        let a: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..2000).map(|_| rng.random::<f64>() + 0.1).collect();
        assert!(ks_two_sample(&a, &b).1 > 0.01);
        assert!(ks_two_sample(&a, &c).1 < 0.01);
    }
}

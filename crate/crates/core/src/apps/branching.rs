//! Malthusian parameter and mean-count asymptotics of an age-dependent
//! multitype branching process.
//!
//! With offspring means `M = (μ_ij)` and lifetime laws `G_i`, the mean counts
//! satisfy `S = g + (M⊗G)∗S`, `g = diag(Ḡ_i)`. Discounting by `e^{−αt}` turns
//! this into `Z = z + (Q⊗F)∗Z` with `q_ij = μ_ij φ_i(α)`,
//! `φ_i(α) = ∫ e^{−αt} G_i(dt)` and `F_i = e^{−αx} G_i(dx) / φ_i(α)`.

use nalgebra::DMatrix;

use crate::apps::root::{decreasing_root, RootOptions, RootReport};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::kernel::{stationary_drift, SemiMarkovKernel};
use crate::mre::{asymptotic_limit, right_edge_mean, solve_mre, GridFunction, TailDecay};
use crate::perron::{is_primitive, perron_pair, PerronData, QSMatrix, DEFAULT_TOL};
use crate::renewal::{renewal_measure, RenewalOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct BranchingModel {
    pub offspring: DMatrix<f64>,
    pub lifetimes: Vec<Family>,
}

impl BranchingModel {
    pub fn validate(&self) -> Result<()> {
        let m = self.offspring.nrows();
        if m == 0 || self.offspring.ncols() != m || self.lifetimes.len() != m {
            return Err(Error::Invalid(format!("{m} types need an {m}x{m} offspring matrix and {m} lifetime laws")));
        }
        for (i, g) in self.lifetimes.iter().enumerate() {
            let mass = g.discretize(1e-3);
            let lo = mass.support_bounds().map_or(0.0, |b| b.0);
            if lo < 0.0 || mass.atoms.iter().any(|a| a.0 <= 0.0 && a.1 > 0.0) {
                return Err(Error::Invalid(format!("lifetime law of type {} must live on (0, inf)", i + 1)));
            }
        }
        let q = QSMatrix::new(self.offspring.clone())?;
        perron_pair(&q, DEFAULT_TOL).map(|_| ())
    }

    /// `φ_i(α)` for every type.
    pub fn phi(&self, alpha: f64) -> Result<Vec<f64>> {
        self.lifetimes.iter().map(|g| g.mgf(-alpha)).collect()
    }

    /// `(μ_ij φ_i(α))`.
    pub fn discounted(&self, alpha: f64) -> Result<QSMatrix> {
        let phi = self.phi(alpha)?;
        let m = self.offspring.nrows();
        QSMatrix::new(DMatrix::from_fn(m, m, |i, j| self.offspring[(i, j)] * phi[i]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchingOptions {
    pub bracket: (f64, f64),
    /// Right end of the window `[0, horizon]`.
    pub horizon: f64,
    pub step: f64,
    /// Fraction of the window averaged for the right-edge value.
    pub edge_fraction: f64,
    /// Also solve the total-age equation `A = f + (M⊗G)∗A`.
    pub age: bool,
    pub require_primitive: bool,
    pub renewal: RenewalOptions,
    pub root: RootOptions,
}

impl Default for BranchingOptions {
    fn default() -> Self {
        Self {
            bracket: (0.0, 1.0),
            horizon: 30.0,
            step: 0.01,
            edge_fraction: 0.05,
            age: false,
            require_primitive: false,
            renewal: RenewalOptions::default(),
            root: RootOptions::default(),
        }
    }
}

/// Discounted solution for one column of the matrix equation together with
/// its predicted limit.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnAsymptotics {
    pub column: usize,
    pub solution: GridFunction,
    pub limit: Vec<f64>,
    pub right_edge: Vec<f64>,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchingReport {
    pub alpha: f64,
    pub root: RootReport,
    pub phi: Vec<f64>,
    pub primitive: bool,
    pub perron: PerronData,
    pub mu: f64,
    /// The transformed kernel `Q⊗F`.
    pub kernel: SemiMarkovKernel,
    /// Columns of `e^{−αt} S(t)`.
    pub counts: Vec<ColumnAsymptotics>,
    /// Columns of `e^{−αt} A(t)` when requested.
    pub ages: Option<Vec<ColumnAsymptotics>>,
}

impl BranchingReport {
    pub fn max_rel_err(&self) -> f64 {
        self.counts.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Malthusian parameter `α` with `ρ((μ_ij φ_i(α))) = 1` and the limits of
/// `e^{−αt} S(t)` (and optionally of the discounted total age).
pub fn malthusian(model: &BranchingModel, opts: &BranchingOptions) -> Result<BranchingReport> {
    model.validate()?;
    let m = model.offspring.nrows();
    let rho = |a: f64| -> Result<f64> { Ok(perron_pair(&model.discounted(a)?, DEFAULT_TOL * 1e-3)?.rho) };
    let root = decreasing_root(&rho, opts.bracket, &opts.root)?;
    let alpha = root.root;
    let q = model.discounted(alpha)?;
    let primitive = is_primitive(&q);
    if opts.require_primitive && !primitive {
        return Err(Error::NotPrimitive);
    }
    let phi = model.phi(alpha)?;
    let mut fams = Vec::with_capacity(m * m);
    for i in 0..m {
        let tilted = model.lifetimes[i].tilt(-alpha)?.0;
        for j in 0..m {
            fams.push((model.offspring[(i, j)] > 0.0).then(|| tilted.clone()));
        }
    }
    let kernel = SemiMarkovKernel::from_families(q.clone(), &fams, opts.step)?;
    let pd = perron_pair(&q, DEFAULT_TOL)?;
    let stats = stationary_drift(&kernel, &pd)?;
    let window = (0.0, opts.horizon);
    let v = renewal_measure(&kernel, &pd, &stats, window, &opts.renewal)?;
    let column = |j: usize, weight: &dyn Fn(f64) -> f64| -> Result<ColumnAsymptotics> {
        let g = &model.lifetimes[j];
        // z is taken to vanish beyond the horizon
        let z = GridFunction::from_fn(m, window, opts.step, |i, t| if i == j { (-alpha * t).exp() * weight(t) * g.survival(t) } else { 0.0 })?
            .with_tails(TailDecay::Zero, TailDecay::Zero);
        let sol = solve_mre(&kernel, &pd, &v, &z, opts.renewal.exec)?;
        let limit = asymptotic_limit(&z, &pd, &stats);
        let right_edge = right_edge_mean(&sol.z_star, opts.edge_fraction);
        let max_rel_err = limit.iter().zip(&right_edge).map(|(l, r)| ((r - l) / l).abs()).fold(0.0, f64::max);
        Ok(ColumnAsymptotics { column: j, solution: sol.z_star, limit, right_edge, max_rel_err })
    };
    let counts = (0..m).map(|j| column(j, &|_| 1.0)).collect::<Result<Vec<_>>>()?;
    let ages = if opts.age { Some((0..m).map(|j| column(j, &|t| t)).collect::<Result<Vec<_>>>()?) } else { None };
    Ok(BranchingReport { alpha, root, phi, primitive, perron: pd, mu: stats.mu, kernel, counts, ages })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp1(m: usize) -> Vec<Family> {
        vec![Family::Exp { rate: 1.0 }; m]
    }

    #[test]
    fn yule_process() {
        let model = BranchingModel { offspring: DMatrix::from_element(1, 1, 2.0), lifetimes: exp1(1) };
        let rep = malthusian(&model, &BranchingOptions { horizon: 15.0, ..Default::default() }).unwrap();
        assert!((rep.alpha - 1.0).abs() < 1e-9);
        assert!((rep.counts[0].limit[0] - 1.0).abs() < 1e-3, "{:?}", rep.counts[0].limit);
        assert!(rep.max_rel_err() < 0.01, "{}", rep.max_rel_err());
    }

    #[test]
    fn periodic_two_type() {
        let model = BranchingModel { offspring: DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]), lifetimes: exp1(2) };
        let opts = BranchingOptions { horizon: 15.0, ..Default::default() };
        let rep = malthusian(&model, &opts).unwrap();
        assert!((rep.alpha - 1.0).abs() < 1e-9);
        assert!(!rep.primitive);
        assert!((rep.counts[0].limit[0] - 0.5).abs() < 1e-3);
        assert!(rep.max_rel_err() < 0.03);
        let strict = BranchingOptions { require_primitive: true, ..opts };
        assert_eq!(malthusian(&model, &strict).unwrap_err(), Error::NotPrimitive);
    }

    #[test]
    fn critical_and_age() {
        let model = BranchingModel { offspring: DMatrix::from_element(1, 1, 1.0), lifetimes: exp1(1) };
        let rep = malthusian(&model, &BranchingOptions { horizon: 10.0, age: true, ..Default::default() }).unwrap();
        assert_eq!(rep.alpha, 0.0);
        // one individual alive at all times, with mean age 1 in the limit
        assert!((rep.counts[0].right_edge[0] - 1.0).abs() < 1e-3);
        let age = &rep.ages.as_ref().unwrap()[0];
        assert!((age.limit[0] - 1.0).abs() < 1e-3, "{:?}", age.limit);
    }

    #[test]
    fn lifetimes_must_be_positive() {
        let model = BranchingModel { offspring: DMatrix::from_element(1, 1, 2.0), lifetimes: vec![Family::Normal { mean: 1.0, sd: 1.0 }] };
        assert!(matches!(model.validate(), Err(Error::Invalid(_))));
    }
}

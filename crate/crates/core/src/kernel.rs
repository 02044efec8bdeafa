//! Semi-Markov kernels `Q⊗F`: increment laws, matrix convolution, powers,
//! lattice classification and stationary drift.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::family::Family;
use crate::grid::{GridMass, ATOM_TOL};
use crate::perron::{harmonic_transform, strongly_connected, PerronData, QSMatrix};

/// Total-mass slack accepted for proper laws.
pub const PROPER_TOL: f64 = 1e-9;

/// A (sub-)probability law on the real line, stored on the global grid and
/// optionally tagged with its analytic family.
#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    pub mass: GridMass,
    pub family: Option<Family>,
}

impl Dist {
    pub fn zero(step: f64) -> Self {
        Self { mass: GridMass::zero(step), family: None }
    }

    pub fn point(x: f64, step: f64) -> Self {
        Self { mass: GridMass::point(x, 1.0, step), family: Some(Family::Point { x }) }
    }

    pub fn from_family(family: Family, step: f64) -> Self {
        Self { mass: family.discretize(step), family: Some(family) }
    }

    pub fn from_mass(mass: GridMass) -> Self {
        Self { mass, family: None }
    }

    pub fn step(&self) -> f64 {
        self.mass.step
    }

    pub fn total(&self) -> f64 {
        self.mass.total()
    }

    pub fn has_density(&self) -> bool {
        match &self.family {
            Some(f) => f.has_density(),
            None => self.mass.has_density(),
        }
    }
}

/// Mean and (optionally) exponential moment of a law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistStats {
    pub mean: f64,
    pub mgf: Option<f64>,
    /// Set when the values come from the grid and the law has mass in the
    /// overflow buckets, so tails were not seen.
    pub tail_warning: bool,
}

pub fn dist_convolve(f: &Dist, g: &Dist) -> Result<Dist> {
    let mass = f.mass.convolve(&g.mass)?;
    let family = match (&f.family, &g.family) {
        (Some(Family::Point { x }), Some(other)) | (Some(other), Some(Family::Point { x })) => {
            Some(Family::Shift { by: *x, inner: Box::new(other.clone()) })
        }
        _ => None,
    };
    Ok(Dist { mass, family })
}

fn grid_moments(mass: &GridMass, lambda: Option<f64>) -> (f64, Option<f64>) {
    let step = mass.step;
    let mut m1 = 0.0;
    let mut mg = 0.0;
    for &(x, w) in &mass.atoms {
        m1 += w * x;
        if let Some(l) = lambda {
            mg += w * (l * x).exp();
        }
    }
    for (idx, &c) in mass.cells.iter().enumerate() {
        let left = (mass.start + idx as i64) as f64 * step;
        m1 += c * (left + 0.5 * step);
        if let Some(l) = lambda {
            // cell mass spread uniformly over the cell
            let e = if (l * step).abs() < 1e-12 { 1.0 } else { (l * step).exp_m1() / (l * step) };
            mg += c * (l * left).exp() * e;
        }
    }
    let total = mass.support_total();
    let mean = if total > 0.0 { m1 / total } else { 0.0 };
    (mean, lambda.map(|_| mg))
}

/// Mean and exponential moment `E exp(lambda X)`. Analytic formulas are used
/// when the law carries a family tag; otherwise grid sums are returned with a
/// tail warning if overflow mass is present.
pub fn dist_stats(f: &Dist, lambda: Option<f64>) -> Result<DistStats> {
    if let Some(fam) = &f.family {
        let mgf = match lambda {
            Some(l) => Some(fam.mgf(l)?),
            None => None,
        };
        return Ok(DistStats { mean: fam.mean(), mgf, tail_warning: false });
    }
    let (mean, mgf) = grid_moments(&f.mass, lambda);
    let tail_warning = f.mass.overflow_left + f.mass.overflow_right > 0.0;
    Ok(DistStats { mean, mgf, tail_warning })
}

/// Whether a kernel carries `Q` weights (quasi-stochastic) or the stochastic
/// weights of its harmonic transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelForm {
    #[default]
    Q,
    P,
}

/// The matrix `(q_ij F_ij)` of weighted increment laws.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiMarkovKernel {
    pub weights: QSMatrix,
    /// Row-major `m × m`; entries with zero weight are ignored.
    pub dists: Vec<Dist>,
    pub step: f64,
    pub form: KernelForm,
}

impl SemiMarkovKernel {
    pub fn new(weights: QSMatrix, dists: Vec<Dist>, step: f64) -> Result<Self> {
        let m = weights.dim();
        if dists.len() != m * m {
            return Err(Error::Invalid(format!("expected {} distributions, got {}", m * m, dists.len())));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Invalid(format!("grid step must be positive, got {step}")));
        }
        if !strongly_connected(&weights) {
            return Err(Error::NotIrreducible);
        }
        for i in 0..m {
            for j in 0..m {
                if weights.get(i, j) <= 0.0 {
                    continue;
                }
                let d = &dists[i * m + j];
                if (d.step() - step).abs() > 1e-12 * step {
                    return Err(Error::GridMismatch { left: step, right: d.step() });
                }
                let t = d.total();
                if (t - 1.0).abs() > PROPER_TOL {
                    return Err(Error::Invalid(format!(
                        "distribution at ({}, {}) has total mass {t}, expected 1",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(Self { weights, dists, step, form: KernelForm::Q })
    }

    /// Builds a kernel from analytic families; `None` marks zero-weight cells.
    pub fn from_families(weights: QSMatrix, families: &[Option<Family>], step: f64) -> Result<Self> {
        let m = weights.dim();
        if families.len() != m * m {
            return Err(Error::Invalid(format!("expected {} distributions, got {}", m * m, families.len())));
        }
        let mut dists = Vec::with_capacity(m * m);
        for (idx, f) in families.iter().enumerate() {
            match f {
                Some(f) => dists.push(Dist::from_family(f.clone(), step)),
                None if weights.get(idx / m, idx % m) > 0.0 => {
                    return Err(Error::Invalid(format!(
                        "missing distribution at ({}, {}) with positive weight",
                        idx / m + 1,
                        idx % m + 1
                    )));
                }
                None => dists.push(Dist::zero(step)),
            }
        }
        Self::new(weights, dists, step)
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.get(i, j)
    }

    pub fn dist(&self, i: usize, j: usize) -> &Dist {
        &self.dists[i * self.dim() + j]
    }

    /// `q_ij F_ij` as a gridded measure.
    pub fn entry(&self, i: usize, j: usize) -> GridMass {
        let w = self.weight(i, j);
        if w > 0.0 {
            self.dist(i, j).mass.scaled(w)
        } else {
            GridMass::zero(self.step)
        }
    }

    /// All entries as a measure matrix.
    pub fn as_matrix(&self) -> MeasureMatrix {
        let m = self.dim();
        let entries = (0..m * m).map(|idx| self.entry(idx / m, idx % m)).collect();
        MeasureMatrix { m, step: self.step, entries }
    }

    /// Same laws with weights replaced (used for harmonic and tilted forms).
    pub fn with_weights(&self, weights: QSMatrix, form: KernelForm) -> Result<Self> {
        let mut k = Self::new(weights, self.dists.clone(), self.step)?;
        k.form = form;
        Ok(k)
    }

    /// The kernel `P⊗F` with `P = D⁻¹QD`.
    pub fn harmonic(&self, pd: &PerronData) -> Result<Self> {
        let ht = harmonic_transform(&self.weights, pd)?;
        self.with_weights(QSMatrix::new(ht.p)?, KernelForm::P)
    }

    /// Largest distance any increment can move to the left (zero for
    /// nonnegative increments).
    pub fn negative_reach(&self) -> f64 {
        let m = self.dim();
        let mut reach: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                if self.weight(i, j) > 0.0 {
                    if let Some((lo, _)) = self.dist(i, j).mass.support_bounds() {
                        reach = reach.max(-lo);
                    }
                }
            }
        }
        reach
    }

    /// Largest distance any increment can move to the right.
    pub fn positive_reach(&self) -> f64 {
        let m = self.dim();
        let mut reach: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                if self.weight(i, j) > 0.0 {
                    if let Some((_, hi)) = self.dist(i, j).mass.support_bounds() {
                        reach = reach.max(hi);
                    }
                }
            }
        }
        reach
    }
}

/// An `m × m` matrix of gridded measures.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureMatrix {
    pub m: usize,
    pub step: f64,
    pub entries: Vec<GridMass>,
}

impl MeasureMatrix {
    /// Diagonal `δ_0`, the zeroth convolution power.
    pub fn identity(m: usize, step: f64) -> Self {
        let entries = (0..m * m)
            .map(|idx| if idx / m == idx % m { GridMass::point(0.0, 1.0, step) } else { GridMass::zero(step) })
            .collect();
        Self { m, step, entries }
    }

    pub fn get(&self, i: usize, j: usize) -> &GridMass {
        &self.entries[i * self.m + j]
    }

    pub fn totals(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.m, |i, j| self.get(i, j).total())
    }
}

/// `(K ∗ B)_ij = Σ_k K_ik ∗ B_kj`.
pub fn kernel_convolve(k: &SemiMarkovKernel, b: &MeasureMatrix, exec: Exec) -> Result<MeasureMatrix> {
    let m = k.dim();
    if b.m != m {
        return Err(Error::Invalid(format!("dimension mismatch: kernel {m}, operand {}", b.m)));
    }
    if (b.step - k.step).abs() > 1e-12 * k.step {
        return Err(Error::GridMismatch { left: k.step, right: b.step });
    }
    let entries = exec.try_map(m * m, |idx| {
        let (i, j) = (idx / m, idx % m);
        let mut acc = GridMass::zero(k.step);
        for l in 0..m {
            let w = k.weight(i, l);
            if w <= 0.0 || b.get(l, j).is_zero() {
                continue;
            }
            let c = k.dist(i, l).mass.convolve(b.get(l, j))?;
            acc.add_scaled(&c, w)?;
        }
        Ok::<_, Error>(acc)
    })?;
    Ok(MeasureMatrix { m, step: k.step, entries })
}

/// `n`-fold convolution power of the kernel.
pub fn kernel_power(k: &SemiMarkovKernel, n: usize, exec: Exec) -> Result<MeasureMatrix> {
    let mut acc = MeasureMatrix::identity(k.dim(), k.step);
    for _ in 0..n {
        acc = kernel_convolve(k, &acc, exec)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatticeType {
    Arithmetic { span: f64, shifts: Vec<f64> },
    NonArithmetic { spread_out: bool },
}

impl LatticeType {
    pub fn is_arithmetic(&self) -> bool {
        matches!(self, LatticeType::Arithmetic { .. })
    }

    pub fn is_spread_out(&self) -> bool {
        matches!(self, LatticeType::NonArithmetic { spread_out: true })
    }
}

/// Default snapping tolerance `1e-9 · max |support point|`.
pub fn default_snap_tol(k: &SemiMarkovKernel) -> f64 {
    let mut big: f64 = 1.0;
    for d in &k.dists {
        for &(x, _) in &d.mass.atoms {
            big = big.max(x.abs());
        }
    }
    1e-9 * big
}

fn real_gcd(a: f64, b: f64, tol: f64) -> f64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    if a < b {
        std::mem::swap(&mut a, &mut b);
    }
    while b > tol {
        let mut r = a % b;
        if b - r <= tol {
            r = 0.0;
        }
        a = b;
        b = r;
    }
    a
}

/// Lattice classification of the kernel.
///
/// Potentials `φ` are assigned along a breadth-first spanning tree from state
/// 0; the span is the tolerant gcd of the residuals `φ(i) + x − φ(j)` over
/// all support points `x` of all positive-weight edges, and the shifts are
/// `φ mod d`.
pub fn lattice_type(k: &SemiMarkovKernel, pd: &PerronData, snap_tol: f64) -> LatticeType {
    let m = k.dim();
    let mut edges: Vec<(usize, usize, &[(f64, f64)])> = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if pd.u[i] * k.weight(i, j) * pd.v[j] <= 0.0 {
                continue;
            }
            let d = k.dist(i, j);
            if d.has_density() {
                return LatticeType::NonArithmetic { spread_out: true };
            }
            edges.push((i, j, &d.mass.atoms));
        }
    }
    let mut phi = vec![f64::NAN; m];
    phi[0] = 0.0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        for &(a, b, atoms) in &edges {
            if a == i && phi[b].is_nan() && !atoms.is_empty() {
                phi[b] = phi[a] + atoms[0].0;
                queue.push_back(b);
            }
        }
    }
    let mut d = 0.0;
    for &(i, j, atoms) in &edges {
        for &(x, w) in atoms {
            if w <= 0.0 {
                continue;
            }
            let r = phi[i] + x - phi[j];
            if r.abs() > snap_tol {
                d = if d == 0.0 { r.abs() } else { real_gcd(d, r, snap_tol) };
            }
        }
    }
    if d < 1e4 * snap_tol {
        return LatticeType::NonArithmetic { spread_out: false };
    }
    let shifts = phi
        .iter()
        .map(|&p| {
            let g = p.rem_euclid(d);
            if g < snap_tol || d - g < snap_tol {
                0.0
            } else {
                g
            }
        })
        .collect();
    LatticeType::Arithmetic { span: d, shifts }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelStats {
    pub mu: f64,
    pub mean_matrix: DMatrix<f64>,
    pub lattice: LatticeType,
}

/// Matrix of means `μ_ij` (zero where the weight vanishes).
pub fn mean_matrix(k: &SemiMarkovKernel) -> Result<DMatrix<f64>> {
    let m = k.dim();
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if k.weight(i, j) > 0.0 {
                out[(i, j)] = dist_stats(k.dist(i, j), None)?.mean;
            }
        }
    }
    Ok(out)
}

/// `Σ_ij u_i q_ij v_j μ_ij`, without the sign requirement.
pub fn drift(k: &SemiMarkovKernel, pd: &PerronData) -> Result<(f64, DMatrix<f64>)> {
    let mm = mean_matrix(k)?;
    let m = k.dim();
    let mut mu = 0.0;
    for i in 0..m {
        for j in 0..m {
            mu += pd.u[i] * k.weight(i, j) * pd.v[j] * mm[(i, j)];
        }
    }
    Ok((mu, mm))
}

/// Drift, mean matrix and lattice type; requires positive drift.
pub fn stationary_drift(k: &SemiMarkovKernel, pd: &PerronData) -> Result<KernelStats> {
    let (mu, mean_matrix) = drift(k, pd)?;
    if !(mu > 0.0) {
        return Err(Error::NonPositiveDrift { mu });
    }
    let lattice = lattice_type(k, pd, default_snap_tol(k));
    Ok(KernelStats { mu, mean_matrix, lattice })
}

/// Checks that all atoms of a measure lie on `offset + dℤ`.
pub fn atoms_on_lattice(mass: &GridMass, offset: f64, span: f64, tol: f64) -> bool {
    mass.atoms.iter().all(|&(x, _)| {
        let r = (x - offset).rem_euclid(span);
        r <= tol || span - r <= tol
    }) && !mass.has_density()
}

/// Tolerance used when snapping grid-located atoms.
pub fn atom_tol(x: f64) -> f64 {
    ATOM_TOL * x.abs().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perron::{perron_pair, DEFAULT_TOL};
    use approx::assert_abs_diff_eq;

    const STEP: f64 = 0.01;

    fn two_state(f12: Family, f21: Family) -> SemiMarkovKernel {
        let q = QSMatrix::from_rows(&[vec![0.0, 2.0], vec![0.5, 0.0]]).unwrap();
        SemiMarkovKernel::from_families(q, &[None, Some(f12), Some(f21), None], STEP).unwrap()
    }

    #[test]
    fn point_convolution() {
        let c = dist_convolve(&Dist::point(0.3, STEP), &Dist::point(1.25, STEP)).unwrap();
        assert_eq!(c.mass.atoms.len(), 1);
        assert_abs_diff_eq!(c.mass.atoms[0].0, 1.55, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mass.atoms[0].1, 1.0);
    }

    #[test]
    fn exp_convolution_is_gamma() {
        let step = 1e-3;
        let e = Dist::from_family(Family::Exp { rate: 1.0 }, step);
        let g = dist_convolve(&e, &e).unwrap();
        assert_abs_diff_eq!(g.total(), 1.0, epsilon = 1e-12);
        let gamma_cdf = |x: f64| 1.0 - (-x).exp() * (1.0 + x);
        let mut worst: f64 = 0.0;
        for k in 0..20_000i64 {
            let exact = gamma_cdf((k + 1) as f64 * step) - gamma_cdf(k as f64 * step);
            worst = worst.max((g.mass.cell(k) - exact).abs());
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn stats_analytic_and_grid() {
        let s = dist_stats(&Dist::point(1.0, STEP), Some(1.0)).unwrap();
        assert_abs_diff_eq!(s.mean, 1.0);
        assert_abs_diff_eq!(s.mgf.unwrap(), 1f64.exp());
        let e = Dist::from_family(Family::Exp { rate: 1.0 }, STEP);
        let s = dist_stats(&e, Some(0.5)).unwrap();
        assert_abs_diff_eq!(s.mgf.unwrap(), 2.0);
        assert!(matches!(dist_stats(&e, Some(1.0)), Err(Error::DivergentMoment { .. })));
        let untagged = Dist::from_mass(e.mass.clone());
        let s = dist_stats(&untagged, Some(0.5)).unwrap();
        assert_abs_diff_eq!(s.mean, 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(s.mgf.unwrap(), 2.0, epsilon = 1e-3);
    }

    #[test]
    fn kernel_square_alternating() {
        let k = two_state(Family::Point { x: 1.0 }, Family::Point { x: 1.0 });
        let p0 = kernel_power(&k, 0, Exec::Sequential).unwrap();
        assert_eq!(p0, MeasureMatrix::identity(2, STEP));
        let p1 = kernel_power(&k, 1, Exec::Sequential).unwrap();
        assert_eq!(p1, k.as_matrix());
        let p2 = kernel_power(&k, 2, Exec::Parallel).unwrap();
        for (i, j, w) in [(0, 0, 1.0), (1, 1, 1.0)] {
            let e = p2.get(i, j);
            assert_eq!(e.atoms.len(), 1);
            assert_abs_diff_eq!(e.atoms[0].0, 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(e.atoms[0].1, w, epsilon = 1e-12);
        }
        assert!(p2.get(0, 1).is_zero() && p2.get(1, 0).is_zero());
    }

    #[test]
    fn drift_examples() {
        let k = two_state(Family::Point { x: 2.0 }, Family::Point { x: 1.0 });
        let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
        let s = stationary_drift(&k, &pd).unwrap();
        assert_abs_diff_eq!(s.mu, 1.5, epsilon = 1e-10);
        let k = two_state(Family::Exp { rate: 1.0 }, Family::Exp { rate: 1.0 });
        assert_abs_diff_eq!(stationary_drift(&k, &pd).unwrap().mu, 1.0, epsilon = 1e-10);
        let k = two_state(Family::Point { x: -1.0 }, Family::Point { x: -2.0 });
        assert!(matches!(stationary_drift(&k, &pd), Err(Error::NonPositiveDrift { .. })));
    }

    #[test]
    fn lattice_examples() {
        let k = two_state(Family::Point { x: 1.5 }, Family::Point { x: 0.5 });
        let pd = perron_pair(&k.weights, DEFAULT_TOL).unwrap();
        match lattice_type(&k, &pd, default_snap_tol(&k)) {
            LatticeType::Arithmetic { span, shifts } => {
                assert_abs_diff_eq!(span, 2.0, epsilon = 1e-9);
                assert_abs_diff_eq!(shifts[0], 0.0);
                assert_abs_diff_eq!(shifts[1], 1.5, epsilon = 1e-9);
            }
            other => panic!("{other:?}"),
        }
        let k = two_state(Family::Exp { rate: 1.0 }, Family::Point { x: 1.0 });
        assert_eq!(lattice_type(&k, &pd, 1e-9), LatticeType::NonArithmetic { spread_out: true });
        // a single cycle is always arithmetic, with span equal to its length
        let k = two_state(Family::Point { x: 1.0 }, Family::Point { x: 2f64.sqrt() });
        match lattice_type(&k, &pd, 1e-9) {
            LatticeType::Arithmetic { span, .. } => assert_abs_diff_eq!(span, 1.0 + 2f64.sqrt(), epsilon = 1e-9),
            other => panic!("{other:?}"),
        }
        let q = QSMatrix::from_rows(&[vec![1.0]]).unwrap();
        let irr = SemiMarkovKernel::from_families(q.clone(), &[Some(Family::parse("mix(0.5:point(1),0.5:point(1.4142135623730951))").unwrap())], STEP).unwrap();
        let pd1 = perron_pair(&irr.weights, DEFAULT_TOL).unwrap();
        assert_eq!(lattice_type(&irr, &pd1, default_snap_tol(&irr)), LatticeType::NonArithmetic { spread_out: false });
        let one = SemiMarkovKernel::from_families(q, &[Some(Family::parse("mix(0.5:point(0.5),0.5:point(1.25))").unwrap())], STEP).unwrap();
        match lattice_type(&one, &pd1, default_snap_tol(&one)) {
            LatticeType::Arithmetic { span, .. } => assert_abs_diff_eq!(span, 0.25, epsilon = 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_names_cell() {
        let q = QSMatrix::from_rows(&[vec![0.0, 2.0], vec![0.5, 0.0]]).unwrap();
        let err = SemiMarkovKernel::from_families(q, &[None, Some(Family::Point { x: 1.0 }), None, None], STEP).unwrap_err();
        assert!(err.to_string().contains("(2, 1)"), "{err}");
    }
}

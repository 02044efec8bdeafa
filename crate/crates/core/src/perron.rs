//! Nonnegative matrices: irreducibility, Perron root and eigenvectors, and the
//! harmonic transform that turns a quasi-stochastic matrix into a stochastic
//! one.
//!
//! Eigenvectors are normalized so that `sum(u) = 1` and `u . v = 1`, which
//! makes `pi_i = u_i v_i` a probability vector.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default tolerance on `|rho - 1|` and on eigen-residuals.
pub const DEFAULT_TOL: f64 = 1e-10;

const MAX_ITERATIONS: usize = 2_000_000;

/// A square matrix with finite nonnegative entries.
#[derive(Debug, Clone, PartialEq)]
pub struct QSMatrix {
    entries: DMatrix<f64>,
}

impl QSMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.nrows() != entries.ncols() {
            return Err(Error::Invalid(format!(
                "matrix must be square with m >= 1, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        for i in 0..entries.nrows() {
            for j in 0..entries.ncols() {
                let q = entries[(i, j)];
                if !q.is_finite() || q < 0.0 {
                    return Err(Error::Invalid(format!("entry ({i},{j}) = {q} is not a finite nonnegative number")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Invalid(format!("expected {m} columns in every row")));
        }
        Self::new(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Zero pattern as adjacency lists (`i -> j` iff `q_ij > 0`).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let m = self.dim();
        (0..m)
            .map(|i| (0..m).filter(|&j| self.get(i, j) > 0.0).collect())
            .collect()
    }
}

/// Perron eigendata of an irreducible nonnegative matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PerronData {
    pub rho: f64,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    pub pi: DVector<f64>,
    pub tol_used: f64,
    pub iterations: usize,
}

impl PerronData {
    /// `pi` rescaled so that `pi_i = 1` for the given reference state.
    pub fn pi_relative_to(&self, i: usize) -> DVector<f64> {
        &self.pi / self.pi[i]
    }
}

/// Stochastic matrix `P = D^-1 Q D` together with the scaling `D = diag(v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicTransform {
    pub p: DMatrix<f64>,
    pub d: DVector<f64>,
}

/// Strongly connected components of a digraph given by adjacency lists, in
/// reverse topological order (Tarjan).
pub fn strongly_connected_components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    struct State<'a> {
        adj: &'a [Vec<usize>],
        index: Vec<Option<usize>>,
        low: Vec<usize>,
        on_stack: Vec<bool>,
        stack: Vec<usize>,
        next: usize,
        out: Vec<Vec<usize>>,
    }

    fn visit(s: &mut State<'_>, v: usize) {
        s.index[v] = Some(s.next);
        s.low[v] = s.next;
        s.next += 1;
        s.stack.push(v);
        s.on_stack[v] = true;
        for k in 0..s.adj[v].len() {
            let w = s.adj[v][k];
            match s.index[w] {
                None => {
                    visit(s, w);
                    s.low[v] = s.low[v].min(s.low[w]);
                }
                Some(iw) if s.on_stack[w] => s.low[v] = s.low[v].min(iw),
                _ => {}
            }
        }
        if Some(s.low[v]) == s.index[v] {
            let mut comp = Vec::new();
            while let Some(w) = s.stack.pop() {
                s.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            comp.sort_unstable();
            s.out.push(comp);
        }
    }

    let n = adj.len();
    let mut s = State {
        adj,
        index: vec![None; n],
        low: vec![0; n],
        on_stack: vec![false; n],
        stack: Vec::new(),
        next: 0,
        out: Vec::new(),
    };
    for v in 0..n {
        if s.index[v].is_none() {
            visit(&mut s, v);
        }
    }
    s.out
}

/// Closed communicating classes (the recurrent classes of a finite chain with
/// this zero pattern).
pub fn closed_classes(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let comps = strongly_connected_components(adj);
    let mut owner = vec![0; adj.len()];
    for (c, comp) in comps.iter().enumerate() {
        for &v in comp {
            owner[v] = c;
        }
    }
    comps
        .iter()
        .enumerate()
        .filter(|(c, comp)| comp.iter().all(|&v| adj[v].iter().all(|&w| owner[w] == *c)))
        .map(|(_, comp)| comp.clone())
        .collect()
}

/// True iff the digraph with an edge `i -> j` whenever `q_ij > 0` is strongly
/// connected.
pub fn strongly_connected(q: &QSMatrix) -> bool {
    strongly_connected_components(&q.adjacency()).len() == 1
}

/// Primitivity via Wielandt's bound: an irreducible pattern is primitive iff
/// its `(m-1)^2 + 1`-th boolean power is all positive.
pub fn is_primitive(q: &QSMatrix) -> bool {
    if !strongly_connected(q) {
        return false;
    }
    let m = q.dim();
    let pattern = DMatrix::from_fn(m, m, |i, j| q.get(i, j) > 0.0);
    let mut power = pattern.clone();
    let exponent = (m - 1) * (m - 1) + 1;
    for _ in 1..exponent {
        power = DMatrix::from_fn(m, m, |i, j| (0..m).any(|k| power[(i, k)] && pattern[(k, j)]));
    }
    power.iter().all(|&b| b)
}

/// Dominant eigenvector of `A + shift I` by power iteration with l1
/// normalization. The shift makes the iteration matrix primitive, which damps
/// the oscillation of periodic patterns (it averages consecutive iterates).
fn dominant_vector(a: &DMatrix<f64>, shift: f64, tol: f64) -> Result<(DVector<f64>, usize)> {
    let m = a.nrows();
    let mut x = DVector::from_element(m, 1.0 / m as f64);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for it in 1..=MAX_ITERATIONS {
        let mut y = a * &x + &x * shift;
        let norm: f64 = y.iter().sum();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NonConvergence { iterations: it, residual: f64::NAN });
        }
        y /= norm;
        let change = (&y - &x).amax() / y.amax();
        x = y;
        if change < best * 0.999 {
            best = change;
            since_best = 0;
        } else {
            since_best += 1;
        }
        // converged to round-off, or stalled after reaching the target
        if change <= 1e-15 || (since_best > 200 && best <= tol * 1e-3) {
            return Ok((x, it));
        }
    }
    Err(Error::NonConvergence { iterations: MAX_ITERATIONS, residual: best })
}

fn check_irreducible(q: &QSMatrix) -> Result<()> {
    if strongly_connected(q) {
        Ok(())
    } else {
        Err(Error::NotIrreducible)
    }
}

/// Spectral radius of an irreducible nonnegative matrix.
pub fn spectral_radius(q: &QSMatrix, tol: f64) -> Result<f64> {
    Ok(perron_pair(q, tol)?.rho)
}

/// Perron root with positive left/right eigenvectors under the normalization
/// `sum(u) = 1`, `u . v = 1`. A spectral radius different from one is allowed.
pub fn perron_pair(q: &QSMatrix, tol: f64) -> Result<PerronData> {
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    check_irreducible(q)?;
    let a = q.matrix();
    let m = q.dim();
    if m == 1 {
        let rho = a[(0, 0)];
        if !(rho > 0.0) {
            return Err(Error::NotIrreducible);
        }
        let one = DVector::from_element(1, 1.0);
        return Ok(PerronData { rho, u: one.clone(), v: one.clone(), pi: one, tol_used: tol, iterations: 0 });
    }
    let shift = a.row_sum().iter().sum::<f64>() / m as f64;
    let (v_raw, it_v) = dominant_vector(a, shift, tol)?;
    let (u_raw, it_u) = dominant_vector(&a.transpose(), shift, tol)?;
    if v_raw.iter().chain(u_raw.iter()).any(|&x| !(x > 0.0)) {
        return Err(Error::NonConvergence { iterations: it_u.max(it_v), residual: f64::NAN });
    }
    let u = &u_raw / u_raw.sum();
    let v = &v_raw / u.dot(&v_raw);
    let rho = u.dot(&(a * &v)) / u.dot(&v);
    let res_right = (a * &v - &v * rho).amax();
    let res_left = (a.tr_mul(&u) - &u * rho).amax();
    let residual = res_left.max(res_right);
    if residual > tol * rho.max(1.0) {
        return Err(Error::NonConvergence { iterations: it_u.max(it_v), residual });
    }
    let pi = u.component_mul(&v);
    Ok(PerronData { rho, u, v, pi, tol_used: tol, iterations: it_u.max(it_v) })
}

/// `P = D^-1 Q D` with `D = diag(v)`; requires `|rho - 1| <= tol`.
pub fn harmonic_transform(q: &QSMatrix, pd: &PerronData) -> Result<HarmonicTransform> {
    if (pd.rho - 1.0).abs() > pd.tol_used {
        return Err(Error::NotQuasiStochastic { rho: pd.rho, tol: pd.tol_used });
    }
    let m = q.dim();
    if pd.v.len() != m {
        return Err(Error::Invalid("Perron data does not match matrix dimension".into()));
    }
    let p = DMatrix::from_fn(m, m, |i, j| q.get(i, j) * pd.v[j] / pd.v[i]);
    Ok(HarmonicTransform { p, d: pd.v.clone() })
}

/// Stationary law `pi_i = u_i v_i` of the harmonic transform.
pub fn stationary_measure(pd: &PerronData) -> DVector<f64> {
    pd.u.component_mul(&pd.v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn alternating() -> QSMatrix {
        QSMatrix::from_rows(&[vec![0.0, 2.0], vec![0.5, 0.0]]).unwrap()
    }

    #[test]
    fn connectivity() {
        assert!(strongly_connected(&QSMatrix::from_rows(&[vec![1.0]]).unwrap()));
        assert!(!strongly_connected(&QSMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap()));
        assert!(strongly_connected(&alternating()));
    }

    #[test]
    fn primitivity() {
        assert!(!is_primitive(&alternating()));
        assert!(is_primitive(&QSMatrix::from_rows(&[vec![0.1, 0.9], vec![1.0, 0.0]]).unwrap()));
    }

    #[test]
    fn rejects_negative_and_nonsquare() {
        assert!(QSMatrix::from_rows(&[vec![-1.0]]).is_err());
        assert!(QSMatrix::from_rows(&[vec![1.0, 0.0]]).is_err());
        assert!(QSMatrix::from_rows(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn spectral_radius_examples() {
        assert_abs_diff_eq!(spectral_radius(&alternating(), 1e-12).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spectral_radius(&QSMatrix::from_rows(&[vec![2.0]]).unwrap(), 1e-12).unwrap(), 2.0);
        let stoch = QSMatrix::from_rows(&[vec![0.3, 0.7], vec![0.4, 0.6]]).unwrap();
        assert_abs_diff_eq!(spectral_radius(&stoch, 1e-12).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reducible_is_an_error() {
        let q = QSMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(perron_pair(&q, 1e-10), Err(Error::NotIrreducible));
    }

    #[test]
    fn alternating_perron_pair() {
        let pd = perron_pair(&alternating(), 1e-12).unwrap();
        assert_abs_diff_eq!(pd.u[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pd.u[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pd.v[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(pd.v[1], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(pd.pi[0], 0.5, epsilon = 1e-12);
        let ht = harmonic_transform(&alternating(), &pd).unwrap();
        assert_abs_diff_eq!(ht.p[(0, 1)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ht.p[(1, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ht.p[(0, 0)], 0.0);
        let pi = stationary_measure(&pd);
        let drift = (pi.transpose() * &ht.p - pi.transpose()).amax();
        assert!(drift < 1e-12);
    }

    #[test]
    fn stochastic_matrix_has_unit_right_vector() {
        let q = QSMatrix::from_rows(&[vec![0.5, 0.5, 0.0], vec![0.2, 0.3, 0.5], vec![0.6, 0.0, 0.4]]).unwrap();
        let pd = perron_pair(&q, 1e-12).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(pd.v[i], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(pd.pi[i], pd.u[i], epsilon = 1e-12);
        }
        let ht = harmonic_transform(&q, &pd).unwrap();
        assert!((ht.p - q.matrix()).amax() < 1e-12);
    }

    #[test]
    fn scalar_case() {
        let pd = perron_pair(&QSMatrix::from_rows(&[vec![1.0]]).unwrap(), 1e-10).unwrap();
        assert_eq!((pd.u[0], pd.v[0], pd.pi[0]), (1.0, 1.0, 1.0));
    }

    #[test]
    fn transform_requires_unit_root() {
        let q = QSMatrix::from_rows(&[vec![2.0]]).unwrap();
        let pd = perron_pair(&q, 1e-10).unwrap();
        assert!(matches!(harmonic_transform(&q, &pd), Err(Error::NotQuasiStochastic { .. })));
    }

    #[test]
    fn closed_class_detection() {
        // 0 -> 1 <-> 2, state 0 transient
        let adj = vec![vec![0, 1], vec![2], vec![1]];
        assert_eq!(closed_classes(&adj), vec![vec![1, 2]]);
    }
}

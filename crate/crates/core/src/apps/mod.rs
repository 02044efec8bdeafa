//! End-to-end drivers built on the core modules: the supremum of a Markov
//! random walk with negative drift, Malthusian growth of age-dependent
//! multitype branching processes, and perpetuities in a Markovian
//! environment.

pub mod branching;
pub mod lindley;
pub mod perpetuity;
pub mod root;

pub use branching::{malthusian, BranchingModel, BranchingOptions, BranchingReport};
pub use lindley::{find_tilt_root, lindley_tail, LindleyOptions, LindleyReport};
pub use perpetuity::{perpetuity, PerpetuityModel, PerpetuityOptions, PerpetuityReport};
pub use root::{RootOptions, RootReport};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub n: usize,
}

/// Weighted least squares line `y = intercept + slope x`.
pub fn fit_line(x: &[f64], y: &[f64], w: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n || w.len() != n {
        return None;
    }
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = (0..n).map(|k| w[k] * (x[k] - mx) * (y[k] - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = (0..n).map(|k| w[k] * (y[k] - intercept - slope * x[k]).powi(2)).sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Some(LineFit { slope, intercept, slope_se, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|t| 0.5 - 2.0 * t).collect();
        let f = fit_line(&x, &y, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-12 && (f.intercept - 0.5).abs() < 1e-12);
        assert!(f.slope_se < 1e-7);
        assert!(fit_line(&[1.0], &[1.0], &[1.0]).is_none());
    }
}

//! Analytic distribution families used to specify increment laws.
//!
//! Textual form (as accepted in model configs):
//! `exp(rate)`, `normal(mean,sd)`, `uniform(a,b)`, `point(x)`,
//! `shift(x, inner)`, `neg(inner)`, `mix(w1:d1, w2:d2, ...)`.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal as NormalSampler};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::GridMass;

/// Tail probability left outside the discretized support of a continuous law.
pub const TAIL_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Exp { rate: f64 },
    Normal { mean: f64, sd: f64 },
    Uniform { a: f64, b: f64 },
    Point { x: f64 },
    Shift { by: f64, inner: Box<Family> },
    Neg(Box<Family>),
    Mix(Vec<(f64, Family)>),
    /// Density proportional to `exp(theta x)` on `[a, b]`; the exponential
    /// tilt of a uniform law.
    TiltedUniform { a: f64, b: f64, theta: f64 },
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Exp { rate } => write!(f, "exp({rate})"),
            Family::Normal { mean, sd } => write!(f, "normal({mean},{sd})"),
            Family::Uniform { a, b } => write!(f, "uniform({a},{b})"),
            Family::Point { x } => write!(f, "point({x})"),
            Family::Shift { by, inner } => write!(f, "shift({by},{inner})"),
            Family::Neg(inner) => write!(f, "neg({inner})"),
            Family::Mix(parts) => {
                write!(f, "mix(")?;
                for (k, (w, d)) in parts.iter().enumerate() {
                    if k > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{w}:{d}")?;
                }
                write!(f, ")")
            }
            Family::TiltedUniform { a, b, theta } => write!(f, "tilted_uniform({a},{b},{theta})"),
        }
    }
}

/// exp(x) - 1 divided by x, continuous at 0.
fn expm1_over(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut last = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(s[last..i].trim());
                last = i + 1;
            }
            _ => {}
        }
    }
    parts.push(s[last..].trim());
    parts
}

impl Family {
    pub fn parse(spec: &str) -> Result<Family> {
        let s = spec.trim();
        let err = || Error::Parse(spec.to_string());
        let open = s.find('(').ok_or_else(err)?;
        if !s.ends_with(')') {
            return Err(err());
        }
        let name = s[..open].trim().to_ascii_lowercase();
        let body = &s[open + 1..s.len() - 1];
        let args = split_top_level(body);
        let num = |k: usize| -> Result<f64> {
            args.get(k).and_then(|a| a.parse::<f64>().ok()).filter(|x| x.is_finite()).ok_or_else(err)
        };
        let want = |n: usize| if args.len() == n { Ok(()) } else { Err(err()) };
        let fam = match name.as_str() {
            "exp" => {
                want(1)?;
                let rate = num(0)?;
                if rate <= 0.0 {
                    return Err(err());
                }
                Family::Exp { rate }
            }
            "normal" => {
                want(2)?;
                let sd = num(1)?;
                if sd <= 0.0 {
                    return Err(err());
                }
                Family::Normal { mean: num(0)?, sd }
            }
            "uniform" => {
                want(2)?;
                let (a, b) = (num(0)?, num(1)?);
                if b <= a {
                    return Err(err());
                }
                Family::Uniform { a, b }
            }
            "point" => {
                want(1)?;
                Family::Point { x: num(0)? }
            }
            "shift" => {
                want(2)?;
                Family::Shift { by: num(0)?, inner: Box::new(Family::parse(args[1])?) }
            }
            "neg" => {
                want(1)?;
                Family::Neg(Box::new(Family::parse(args[0])?))
            }
            "mix" => {
                let mut parts = Vec::new();
                for a in &args {
                    let colon = a.find(':').ok_or_else(err)?;
                    let w: f64 = a[..colon].trim().parse().map_err(|_| err())?;
                    if !(w >= 0.0) {
                        return Err(err());
                    }
                    parts.push((w, Family::parse(&a[colon + 1..])?));
                }
                let total: f64 = parts.iter().map(|p| p.0).sum();
                if parts.is_empty() || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Parse(format!("{spec} (mixture weights sum to {total})")));
                }
                Family::Mix(parts)
            }
            _ => return Err(err()),
        };
        Ok(fam)
    }

    pub fn mean(&self) -> f64 {
        match self {
            Family::Exp { rate } => 1.0 / rate,
            Family::Normal { mean, .. } => *mean,
            Family::Uniform { a, b } => 0.5 * (a + b),
            Family::Point { x } => *x,
            Family::Shift { by, inner } => by + inner.mean(),
            Family::Neg(inner) => -inner.mean(),
            Family::Mix(parts) => parts.iter().map(|(w, d)| w * d.mean()).sum(),
            Family::TiltedUniform { a, b, theta } => {
                let l = b - a;
                let t = theta * l;
                if t.abs() < 1e-3 {
                    0.5 * (a + b) + theta * l * l / 12.0 - theta.powi(3) * l.powi(4) / 720.0
                } else {
                    a + l / -(-t).exp_m1() - 1.0 / theta
                }
            }
        }
    }

    /// Open interval of `lambda` on which the moment generating function is
    /// finite.
    pub fn mgf_domain(&self) -> (f64, f64) {
        match self {
            Family::Exp { rate } => (f64::NEG_INFINITY, *rate),
            Family::Shift { inner, .. } => inner.mgf_domain(),
            Family::Neg(inner) => {
                let (lo, hi) = inner.mgf_domain();
                (-hi, -lo)
            }
            Family::Mix(parts) => parts
                .iter()
                .filter(|p| p.0 > 0.0)
                .map(|p| p.1.mgf_domain())
                .fold((f64::NEG_INFINITY, f64::INFINITY), |acc, d| (acc.0.max(d.0), acc.1.min(d.1))),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// `E exp(lambda X)`.
    pub fn mgf(&self, lambda: f64) -> Result<f64> {
        let (lo, hi) = self.mgf_domain();
        if !(lambda > lo && lambda < hi) {
            return Err(Error::DivergentMoment { lambda });
        }
        Ok(match self {
            Family::Exp { rate } => rate / (rate - lambda),
            Family::Normal { mean, sd } => (mean * lambda + 0.5 * sd * sd * lambda * lambda).exp(),
            Family::Uniform { a, b } => (lambda * a).exp() * expm1_over(lambda * (b - a)),
            Family::Point { x } => (lambda * x).exp(),
            Family::Shift { by, inner } => (lambda * by).exp() * inner.mgf(lambda)?,
            Family::Neg(inner) => inner.mgf(-lambda)?,
            Family::Mix(parts) => {
                let mut acc = 0.0;
                for (w, d) in parts {
                    if *w > 0.0 {
                        acc += w * d.mgf(lambda)?;
                    }
                }
                acc
            }
            Family::TiltedUniform { a, b, theta } => {
                let l = b - a;
                (lambda * a).exp() * expm1_over((theta + lambda) * l) / expm1_over(theta * l)
            }
        })
    }

    /// Exponentially tilted law `exp(lambda x) F(dx) / mgf(lambda)` together
    /// with `mgf(lambda)`.
    pub fn tilt(&self, lambda: f64) -> Result<(Family, f64)> {
        let phi = self.mgf(lambda)?;
        let fam = match self {
            Family::Exp { rate } => Family::Exp { rate: rate - lambda },
            Family::Normal { mean, sd } => Family::Normal { mean: mean + lambda * sd * sd, sd: *sd },
            Family::Uniform { a, b } => Family::TiltedUniform { a: *a, b: *b, theta: lambda },
            Family::TiltedUniform { a, b, theta } => Family::TiltedUniform { a: *a, b: *b, theta: theta + lambda },
            Family::Point { x } => Family::Point { x: *x },
            Family::Shift { by, inner } => Family::Shift { by: *by, inner: Box::new(inner.tilt(lambda)?.0) },
            Family::Neg(inner) => Family::Neg(Box::new(inner.tilt(-lambda)?.0)),
            Family::Mix(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                for (w, d) in parts {
                    if *w > 0.0 {
                        let (t, p) = d.tilt(lambda)?;
                        out.push((w * p / phi, t));
                    }
                }
                Family::Mix(out)
            }
        };
        Ok((fam, phi))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Family::Exp { rate } => Exp::new(*rate).expect("positive rate").sample(rng),
            Family::Normal { mean, sd } => NormalSampler::new(*mean, *sd).expect("positive sd").sample(rng),
            Family::Uniform { a, b } => a + (b - a) * rng.random::<f64>(),
            Family::Point { x } => *x,
            Family::Shift { by, inner } => by + inner.sample(rng),
            Family::Neg(inner) => -inner.sample(rng),
            Family::Mix(parts) => {
                let mut r = rng.random::<f64>();
                for (w, d) in parts {
                    if r < *w {
                        return d.sample(rng);
                    }
                    r -= w;
                }
                parts.last().expect("nonempty mixture").1.sample(rng)
            }
            Family::TiltedUniform { a, b, theta } => {
                let u: f64 = rng.random();
                let l = b - a;
                if (theta * l).abs() < 1e-12 {
                    a + u * l
                } else {
                    a + (u * (theta * l).exp_m1()).ln_1p() / theta
                }
            }
        }
    }

    /// Discretizes the law on the global grid. Atoms stay atoms; continuous
    /// parts become exact cell probabilities, with at most [`TAIL_EPS`] per
    /// side moved to the overflow buckets.
    pub fn discretize(&self, step: f64) -> GridMass {
        let mut out = GridMass::zero(step);
        self.discretize_into(step, 1.0, 1.0, 0.0, &mut out);
        out
    }

    fn discretize_into(&self, step: f64, weight: f64, sign: f64, shift: f64, out: &mut GridMass) {
        match self {
            Family::Point { x } => {
                let _ = out.add_scaled(&GridMass::point(sign * x + shift, 1.0, step), weight);
            }
            Family::Shift { by, inner } => inner.discretize_into(step, weight, sign, shift + sign * by, out),
            Family::Neg(inner) => inner.discretize_into(step, weight, -sign, shift, out),
            Family::Mix(parts) => {
                for (w, d) in parts {
                    if *w > 0.0 {
                        d.discretize_into(step, weight * w, sign, shift, out);
                    }
                }
            }
            leaf => {
                let leaf = Leaf::new(leaf);
                let (ylo, yhi) = leaf.support();
                let (xlo, xhi) = if sign > 0.0 { (ylo + shift, yhi + shift) } else { (shift - yhi, shift - ylo) };
                let k0 = (xlo / step).floor() as i64;
                let k1 = (xhi / step).ceil() as i64;
                let mut cells = Vec::with_capacity((k1 - k0).max(0) as usize);
                for k in k0..k1 {
                    let l = k as f64 * step;
                    let r = l + step;
                    let m = if sign > 0.0 { leaf.mass(l - shift, r - shift) } else { leaf.mass(shift - r, shift - l) };
                    cells.push(m.max(0.0));
                }
                let inside: f64 = cells.iter().sum();
                let below = if sign > 0.0 { leaf.mass(f64::NEG_INFINITY, ylo) } else { leaf.mass(yhi, f64::INFINITY) };
                let above = (1.0 - inside - below).max(0.0);
                let mut piece = GridMass::from_cells(step, k0, cells);
                piece.overflow_left = below;
                piece.overflow_right = above;
                let _ = out.add_scaled(&piece, weight);
            }
        }
    }

    /// `P(Y > x)`.
    pub fn survival(&self, x: f64) -> f64 {
        match self {
            Family::Point { x: p } => f64::from(u8::from(*p > x)),
            Family::Shift { by, inner } => inner.survival(x - by),
            Family::Neg(inner) => inner.below(-x),
            Family::Mix(parts) => parts.iter().map(|(w, d)| w * d.survival(x)).sum(),
            leaf => Leaf::new(leaf).mass(x, f64::INFINITY),
        }
    }

    /// `P(Y < x)`.
    fn below(&self, x: f64) -> f64 {
        match self {
            Family::Point { x: p } => f64::from(u8::from(*p < x)),
            Family::Shift { by, inner } => inner.below(x - by),
            Family::Neg(inner) => inner.survival(-x),
            Family::Mix(parts) => parts.iter().map(|(w, d)| w * d.below(x)).sum(),
            leaf => Leaf::new(leaf).mass(f64::NEG_INFINITY, x),
        }
    }

    pub fn has_density(&self) -> bool {
        match self {
            Family::Point { .. } => false,
            Family::Shift { inner, .. } | Family::Neg(inner) => inner.has_density(),
            Family::Mix(parts) => parts.iter().any(|(w, d)| *w > 0.0 && d.has_density()),
            _ => true,
        }
    }
}

/// A continuous leaf family with cdf/survival evaluations.
enum Leaf {
    Exp(f64),
    Normal(Normal, f64),
    Uniform(f64, f64),
    Tilted(f64, f64, f64),
}

impl Leaf {
    fn new(f: &Family) -> Leaf {
        match f {
            Family::Exp { rate } => Leaf::Exp(*rate),
            Family::Normal { mean, sd } => Leaf::Normal(Normal::new(*mean, *sd).expect("valid normal"), *mean),
            Family::Uniform { a, b } => Leaf::Uniform(*a, *b),
            Family::TiltedUniform { a, b, theta } => Leaf::Tilted(*a, *b, *theta),
            _ => unreachable!("not a continuous leaf"),
        }
    }

    fn support(&self) -> (f64, f64) {
        match self {
            Leaf::Exp(rate) => (0.0, -TAIL_EPS.ln() / rate),
            Leaf::Normal(n, mean) => {
                let lo = n.inverse_cdf(TAIL_EPS);
                (lo, 2.0 * mean - lo)
            }
            Leaf::Uniform(a, b) | Leaf::Tilted(a, b, _) => (*a, *b),
        }
    }

    /// `P(l < Y <= r)`, computed from the tail nearer the interval.
    fn mass(&self, l: f64, r: f64) -> f64 {
        if r <= l {
            return 0.0;
        }
        match self {
            Leaf::Exp(rate) => {
                let l = l.max(0.0);
                if r <= l {
                    0.0
                } else {
                    (-rate * l).exp() * -(-rate * (r - l)).exp_m1()
                }
            }
            Leaf::Normal(n, mean) => {
                if l >= *mean {
                    n.sf(l) - n.sf(r)
                } else {
                    n.cdf(r) - n.cdf(l)
                }
            }
            Leaf::Uniform(a, b) => ((r.min(*b) - l.max(*a)) / (b - a)).max(0.0),
            Leaf::Tilted(a, b, theta) => {
                let (l, r) = (l.max(*a), r.min(*b));
                if r <= l {
                    return 0.0;
                }
                let len = b - a;
                // integral of exp(theta y) over [l, r] relative to [a, b]
                let num = (theta * (l - a)).exp() * expm1_over(theta * (r - l)) * (r - l);
                num / (expm1_over(theta * len) * len)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_roundtrip_and_errors() {
        let f = Family::parse("mix(0.25:exp(2), 0.75:shift(1, neg(uniform(0,1))))").unwrap();
        assert_eq!(Family::parse(&f.to_string()).unwrap(), f);
        assert!(Family::parse("exp(-1)").is_err());
        assert!(Family::parse("mix(0.5:point(1))").is_err());
        assert!(Family::parse("gamma(2,1)").is_err());
        assert!(Family::parse("normal(0)").is_err());
    }

    #[test]
    fn exponential_moments() {
        let f = Family::Exp { rate: 1.0 };
        assert_abs_diff_eq!(f.mean(), 1.0);
        assert_abs_diff_eq!(f.mgf(0.5).unwrap(), 2.0);
        assert_eq!(f.mgf(1.0), Err(Error::DivergentMoment { lambda: 1.0 }));
        let p = Family::Point { x: 1.0 };
        assert_abs_diff_eq!(p.mgf(1.0).unwrap(), 1f64.exp());
    }

    #[test]
    fn queue_increment_has_unit_root() {
        // service Exp(2) minus interarrival Exp(1)
        let g = Family::parse("mix(0.3333333333333333:exp(2), 0.6666666666666667:neg(exp(1)))").unwrap();
        assert_abs_diff_eq!(g.mgf(1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.mean(), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn tilted_uniform_mean_matches_quadrature() {
        for theta in [-3.0, -0.5, 1e-9, 0.7, 4.0] {
            let f = Family::TiltedUniform { a: -1.0, b: 2.0, theta };
            let n = 200_000;
            let h = 3.0 / n as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..n {
                let y = -1.0 + (k as f64 + 0.5) * h;
                let w = (theta * y).exp();
                num += y * w;
                den += w;
            }
            assert_abs_diff_eq!(f.mean(), num / den, epsilon = 1e-6);
        }
    }

    #[test]
    fn tilt_is_consistent_with_mgf() {
        let g = Family::parse("mix(0.5:normal(-1,1), 0.5:shift(0.5, uniform(-1,1)))").unwrap();
        let (t, phi) = g.tilt(0.8).unwrap();
        assert_abs_diff_eq!(phi, g.mgf(0.8).unwrap());
        // mgf of the tilted law at s equals mgf(0.8 + s) / mgf(0.8)
        assert_abs_diff_eq!(t.mgf(0.3).unwrap(), g.mgf(1.1).unwrap() / phi, epsilon = 1e-12);
        assert_abs_diff_eq!(t.mgf(0.0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn discretization_conserves_mass() {
        for spec in ["exp(1)", "normal(0.5,2)", "uniform(-0.333,1.7)", "neg(exp(3))", "mix(0.5:point(0.25),0.5:exp(2))"] {
            let g = Family::parse(spec).unwrap().discretize(0.01);
            assert_abs_diff_eq!(g.total(), 1.0, epsilon = 1e-12);
            assert!(g.overflow_left + g.overflow_right < 1e-14, "{spec}");
        }
        let g = Family::parse("exp(1)").unwrap().discretize(0.001);
        assert_abs_diff_eq!(g.cells[0], 1.0 - (-0.001f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn sampler_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for spec in ["exp(2)", "neg(exp(1))", "uniform(1,3)", "mix(0.5:point(1),0.5:normal(3,1))"] {
            let f = Family::parse(spec).unwrap();
            let n = 200_000;
            let m: f64 = (0..n).map(|_| f.sample(&mut rng)).sum::<f64>() / n as f64;
            assert!((m - f.mean()).abs() < 0.02, "{spec}: {m}");
        }
        let f = Family::TiltedUniform { a: 0.0, b: 1.0, theta: 2.0 };
        let n = 200_000;
        let m: f64 = (0..n).map(|_| f.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((m - f.mean()).abs() < 0.01);
    }
}

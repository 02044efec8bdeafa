//! Bracketed solvers for `ρ(x) = 1` where `ρ` is a spectral radius depending
//! on a tilt or discount parameter.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootOptions {
    /// Required accuracy `|ρ(root) − 1|`.
    pub tol: f64,
    /// Bracket doublings before giving up.
    pub max_expansions: usize,
}

impl Default for RootOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_expansions: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootReport {
    pub root: f64,
    pub rho: f64,
    /// Final bracket `[lo, hi]`.
    pub bracket: (f64, f64),
    pub evaluations: usize,
}

struct Counter<'a> {
    rho: &'a dyn Fn(f64) -> Result<f64>,
    n: usize,
}

impl Counter<'_> {
    fn g(&mut self, x: f64) -> Result<f64> {
        self.n += 1;
        Ok((self.rho)(x)? - 1.0)
    }
}

fn divergent(e: &Error) -> bool {
    matches!(e, Error::DivergentMoment { .. })
}

/// Bisection with `g(lo) < 0 <= g(hi)` when `rising`, the reverse otherwise.
fn bisect(c: &mut Counter, mut lo: f64, mut hi: f64, rising: bool, opts: &RootOptions, input: (f64, f64)) -> Result<RootReport> {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g = c.g(mid)?;
        if g == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if (g < 0.0) == rising {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let rho = c.g(root)? + 1.0;
    if (rho - 1.0).abs() > opts.tol {
        return Err(Error::NoRoot { lo: input.0, hi: input.1 });
    }
    Ok(RootReport { root, rho, bracket: (lo, hi), evaluations: c.n })
}

/// Positive root of `ρ(x) = 1` for log-convex `ρ` with `ρ(0) = 1` and
/// `ρ'(0) < 0`; the trivial root at 0 is excluded.
///
/// The upper end is doubled while `ρ < 1`. When the moment generating
/// function diverges at the upper end, the finite part of the bracket is
/// searched for a point with `ρ >= 1`.
pub fn convex_positive_root(rho: &dyn Fn(f64) -> Result<f64>, bracket: (f64, f64), opts: &RootOptions) -> Result<RootReport> {
    let (a, b) = bracket;
    if !(b > 0.0) || !(b > a) {
        return Err(Error::Invalid(format!("root bracket [{a}, {b}] must have a positive upper end")));
    }
    let mut c = Counter { rho, n: 0 };
    let no_root = || Error::NoRoot { lo: a, hi: b };
    // a left point inside the region ρ < 1
    let mut lo = if a > 0.0 { a } else { b * 1e-6 };
    let mut found = false;
    for _ in 0..80 {
        match c.g(lo) {
            Ok(g) if g < 0.0 => {
                found = true;
                break;
            }
            Ok(_) => lo *= 0.5,
            Err(e) if divergent(&e) => lo *= 0.5,
            Err(e) => return Err(e),
        }
    }
    if !found {
        return Err(no_root());
    }
    let mut hi = b.max(2.0 * lo);
    for _ in 0..=opts.max_expansions {
        match c.g(hi) {
            Ok(g) if g >= 0.0 => return bisect(&mut c, lo, hi, true, opts, bracket),
            Ok(_) => {
                lo = hi;
                hi *= 2.0;
            }
            Err(e) if divergent(&e) => {
                // ρ < 1 at lo, undefined at hi: look for ρ >= 1 in between
                let mut d = hi;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + d);
                    if mid <= lo || mid >= d {
                        break;
                    }
                    match c.g(mid) {
                        Ok(g) if g >= 0.0 => return bisect(&mut c, lo, mid, true, opts, bracket),
                        Ok(_) => lo = mid,
                        Err(e) if divergent(&e) => d = mid,
                        Err(e) => return Err(e),
                    }
                }
                return Err(no_root());
            }
            Err(e) => return Err(e),
        }
    }
    Err(no_root())
}

/// Root of `ρ(x) = 1` for decreasing `ρ`, expanding the bracket outwards
/// (halving towards the other end where moments diverge).
pub fn decreasing_root(rho: &dyn Fn(f64) -> Result<f64>, bracket: (f64, f64), opts: &RootOptions) -> Result<RootReport> {
    let (a, b) = bracket;
    if !(b > a) {
        return Err(Error::Invalid(format!("root bracket [{a}, {b}] is empty")));
    }
    let mut c = Counter { rho, n: 0 };
    let no_root = || Error::NoRoot { lo: a, hi: b };
    let (mut lo, mut hi) = (a, b);
    let mut g_hi = c.g(hi)?;
    if g_hi == 0.0 {
        return Ok(RootReport { root: hi, rho: 1.0, bracket: (hi, hi), evaluations: c.n });
    }
    let mut expansions = 0;
    while g_hi > 0.0 {
        let w = hi - lo;
        lo = hi;
        hi += 2.0 * w;
        g_hi = c.g(hi)?;
        expansions += 1;
        if expansions > opts.max_expansions {
            return Err(no_root());
        }
    }
    let g_lo;
    loop {
        match c.g(lo) {
            Ok(g) if g >= 0.0 => {
                g_lo = g;
                break;
            }
            Ok(_) => {
                let w = hi - lo;
                hi = lo;
                lo -= 2.0 * w;
            }
            Err(e) if divergent(&e) => {
                // undefined at lo, ρ < 1 at hi: look for ρ >= 1 in between
                let mut d = lo;
                let mut ok = None;
                for _ in 0..200 {
                    let mid = 0.5 * (d + hi);
                    if mid <= d || mid >= hi {
                        break;
                    }
                    match c.g(mid) {
                        Ok(g) if g >= 0.0 => {
                            ok = Some((mid, g));
                            break;
                        }
                        Ok(_) => hi = mid,
                        Err(e) if divergent(&e) => d = mid,
                        Err(e) => return Err(e),
                    }
                }
                let (x, g) = ok.ok_or_else(no_root)?;
                lo = x;
                g_lo = g;
                break;
            }
            Err(e) => return Err(e),
        }
        expansions += 1;
        if expansions > opts.max_expansions {
            return Err(no_root());
        }
    }
    if g_lo == 0.0 {
        return Ok(RootReport { root: lo, rho: 1.0, bracket: (lo, lo), evaluations: c.n });
    }
    bisect(&mut c, lo, hi, false, opts, bracket)
}

//! Gridded measures on the real line.
//!
//! A [`GridMass`] is a finite list of atoms plus piecewise-uniform mass on the
//! global cells `[k*step, (k+1)*step)`, plus two scalar buckets for mass that
//! left the represented support. Convolution of two piecewise-uniform cells is
//! triangular and is split evenly over the two cells it covers; an off-grid
//! atom shifts cells by splitting them linearly. Both rules are convolutions
//! with fixed sequences, so the algebra stays associative and commutative as
//! long as atoms sit on grid points.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Relative tolerance used when merging atoms and snapping to grid points.
pub const ATOM_TOL: f64 = 1e-9;

const DIRECT_LIMIT: usize = 48;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Full linear convolution of two sequences.
pub fn convolve_seq(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= DIRECT_LIMIT {
        let mut out = vec![0.0; out_len];
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        for (s, &x) in short.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out[s..s + long.len()].iter_mut().zip(long) {
                *o += x * y;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    });
    // both real inputs packed into one complex transform
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|k| Complex::new(a.get(k).copied().unwrap_or(0.0), b.get(k).copied().unwrap_or(0.0)))
        .collect();
    fwd.process(&mut buf);
    let mut prod = vec![Complex::new(0.0, 0.0); n];
    for k in 0..n {
        let z = buf[k];
        let zc = buf[(n - k) % n].conj();
        let fa = (z + zc) * 0.5;
        let fb = (z - zc) * Complex::new(0.0, -0.5);
        prod[k] = fa * fb;
    }
    inv.process(&mut prod);
    let scale = 1.0 / n as f64;
    prod[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Splits a location into a grid index and the fractional offset in `[0, 1)`.
pub(crate) fn split_location(x: f64, step: f64) -> (i64, f64) {
    let r = x / step;
    let s = (r + ATOM_TOL).floor();
    let f = (r - s).max(0.0);
    (s as i64, if f < ATOM_TOL { 0.0 } else { f })
}

pub(crate) fn same_step(a: f64, b: f64) -> Result<()> {
    if (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) {
        Ok(())
    } else {
        Err(Error::GridMismatch { left: a, right: b })
    }
}

fn atoms_close(x: f64, y: f64) -> bool {
    (x - y).abs() <= ATOM_TOL * x.abs().max(y.abs()).max(1.0)
}

/// Sorts atoms and merges those at (numerically) equal locations.
pub(crate) fn normalize_atoms(atoms: &mut Vec<(f64, f64)>) {
    atoms.retain(|&(_, w)| w != 0.0);
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    for &(x, w) in atoms.iter() {
        match out.last_mut() {
            Some(last) if atoms_close(last.0, x) => last.1 += w,
            _ => out.push((x, w)),
        }
    }
    *atoms = out;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMass {
    pub step: f64,
    /// `(location, mass)` sorted by location.
    pub atoms: Vec<(f64, f64)>,
    /// Index of the first cell in `cells`.
    pub start: i64,
    pub cells: Vec<f64>,
    pub overflow_left: f64,
    pub overflow_right: f64,
}

impl GridMass {
    pub fn zero(step: f64) -> Self {
        Self { step, atoms: Vec::new(), start: 0, cells: Vec::new(), overflow_left: 0.0, overflow_right: 0.0 }
    }

    pub fn point(x: f64, mass: f64, step: f64) -> Self {
        let mut g = Self::zero(step);
        if mass != 0.0 {
            g.atoms.push((x, mass));
        }
        g
    }

    pub fn from_cells(step: f64, start: i64, cells: Vec<f64>) -> Self {
        let mut g = Self { cells, start, ..Self::zero(step) };
        g.trim();
        g
    }

    pub fn atom_total(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    pub fn cell_total(&self) -> f64 {
        self.cells.iter().sum()
    }

    /// Mass on the represented support (atoms and cells).
    pub fn support_total(&self) -> f64 {
        self.atom_total() + self.cell_total()
    }

    pub fn total(&self) -> f64 {
        self.support_total() + self.overflow_left + self.overflow_right
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.is_empty() && self.cells.iter().all(|&c| c == 0.0) && self.overflow_left == 0.0 && self.overflow_right == 0.0
    }

    pub fn has_density(&self) -> bool {
        self.cells.iter().any(|&c| c > 0.0)
    }

    pub fn end(&self) -> i64 {
        self.start + self.cells.len() as i64
    }

    pub fn cell(&self, k: i64) -> f64 {
        if k < self.start || k >= self.end() {
            0.0
        } else {
            self.cells[(k - self.start) as usize]
        }
    }

    /// Smallest and largest point carrying mass on the represented support.
    pub fn support_bounds(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        if let (Some(f), Some(l)) = (self.atoms.first(), self.atoms.last()) {
            lo = lo.min(f.0);
            hi = hi.max(l.0);
        }
        if let Some(first) = self.cells.iter().position(|&c| c != 0.0) {
            let last = self.cells.iter().rposition(|&c| c != 0.0).unwrap();
            lo = lo.min((self.start + first as i64) as f64 * self.step);
            hi = hi.max((self.start + last as i64 + 1) as f64 * self.step);
        }
        (lo <= hi).then_some((lo, hi))
    }

    fn trim(&mut self) {
        let first = self.cells.iter().position(|&c| c != 0.0);
        match first {
            None => {
                self.cells.clear();
                self.start = 0;
            }
            Some(f) => {
                let l = self.cells.iter().rposition(|&c| c != 0.0).unwrap();
                self.cells.truncate(l + 1);
                self.cells.drain(..f);
                self.start += f as i64;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.atoms.iter_mut().for_each(|a| a.1 *= c);
        self.cells.iter_mut().for_each(|x| *x *= c);
        self.overflow_left *= c;
        self.overflow_right *= c;
        if c == 0.0 {
            self.atoms.clear();
            self.cells.clear();
            self.start = 0;
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut g = self.clone();
        g.scale(c);
        g
    }

    /// Adds `c * other` in place.
    pub fn add_scaled(&mut self, other: &GridMass, c: f64) -> Result<()> {
        same_step(self.step, other.step)?;
        if !other.atoms.is_empty() {
            self.atoms.extend(other.atoms.iter().map(|&(x, w)| (x, c * w)));
            normalize_atoms(&mut self.atoms);
        }
        if !other.cells.is_empty() {
            if self.cells.is_empty() {
                self.start = other.start;
            }
            let lo = self.start.min(other.start);
            let hi = self.end().max(other.end());
            if lo < self.start || hi > self.end() {
                let mut grown = vec![0.0; (hi - lo) as usize];
                let off = (self.start - lo) as usize;
                grown[off..off + self.cells.len()].copy_from_slice(&self.cells);
                self.cells = grown;
                self.start = lo;
            }
            let off = (other.start - self.start) as usize;
            for (s, &o) in self.cells[off..].iter_mut().zip(&other.cells) {
                *s += c * o;
            }
        }
        self.overflow_left += c * other.overflow_left;
        self.overflow_right += c * other.overflow_right;
        Ok(())
    }

    /// Moves everything outside `[lo, hi]` into the overflow buckets. Cells are
    /// kept when they intersect the interval.
    pub fn truncate(&mut self, lo: f64, hi: f64) {
        let klo = (lo / self.step + ATOM_TOL).floor() as i64;
        let khi = (hi / self.step - ATOM_TOL).ceil() as i64;
        if !self.cells.is_empty() {
            let mut left = 0.0;
            let mut right = 0.0;
            for (idx, c) in self.cells.iter_mut().enumerate() {
                let k = self.start + idx as i64;
                if k < klo {
                    left += *c;
                    *c = 0.0;
                } else if k >= khi {
                    right += *c;
                    *c = 0.0;
                }
            }
            self.overflow_left += left;
            self.overflow_right += right;
            self.trim();
        }
        let tol = ATOM_TOL * lo.abs().max(hi.abs()).max(1.0);
        let mut kept = Vec::with_capacity(self.atoms.len());
        for &(x, w) in &self.atoms {
            if x < lo - tol {
                self.overflow_left += w;
            } else if x > hi + tol {
                self.overflow_right += w;
            } else {
                kept.push((x, w));
            }
        }
        self.atoms = kept;
    }

    /// Mass of atoms and cells lying in `(-inf, t]`, overflow excluded.
    pub fn support_mass_le(&self, t: f64) -> f64 {
        let tol = ATOM_TOL * t.abs().max(1.0);
        let atoms: f64 = self.atoms.iter().take_while(|a| a.0 <= t + tol).map(|a| a.1).sum();
        atoms + self.cells_below(t)
    }

    fn cells_below(&self, t: f64) -> f64 {
        let r = t / self.step;
        let mut acc = 0.0;
        for (idx, &c) in self.cells.iter().enumerate() {
            let k = (self.start + idx as i64) as f64;
            if k >= r {
                break;
            }
            acc += c * (r - k).min(1.0);
        }
        acc
    }

    /// Re-grids the atoms as cell masses (each atom split linearly between the
    /// two nearest cells), returning `(start, sequence)`.
    fn rasterize_atoms(&self) -> Option<(i64, Vec<f64>)> {
        let first = self.atoms.first()?;
        let last = self.atoms.last().unwrap();
        let s0 = split_location(first.0, self.step).0;
        let s1 = split_location(last.0, self.step).0;
        let mut seq = vec![0.0; (s1 - s0 + 2) as usize];
        for &(x, w) in &self.atoms {
            let (s, f) = split_location(x, self.step);
            let i = (s - s0) as usize;
            seq[i] += w * (1.0 - f);
            seq[i + 1] += w * f;
        }
        Some((s0, seq))
    }

    /// Convolution of two gridded measures.
    pub fn convolve(&self, other: &GridMass) -> Result<GridMass> {
        same_step(self.step, other.step)?;
        let step = self.step;
        let mut atoms = Vec::with_capacity(self.atoms.len() * other.atoms.len());
        for &(x, w) in &self.atoms {
            for &(y, v) in &other.atoms {
                atoms.push((x + y, w * v));
            }
        }
        normalize_atoms(&mut atoms);

        let mut pieces: Vec<(i64, Vec<f64>)> = Vec::new();
        if !self.cells.is_empty() && !other.cells.is_empty() {
            let c = convolve_seq(&self.cells, &other.cells);
            let mut split = vec![0.0; c.len() + 1];
            for (n, &x) in c.iter().enumerate() {
                split[n] += 0.5 * x;
                split[n + 1] += 0.5 * x;
            }
            pieces.push((self.start + other.start, split));
        }
        for (point_side, cell_side) in [(self, other), (other, self)] {
            if cell_side.cells.is_empty() || point_side.atoms.is_empty() {
                continue;
            }
            if point_side.atoms.len() <= DIRECT_LIMIT {
                for &(x, w) in &point_side.atoms {
                    let (s, f) = split_location(x, step);
                    let mut seq = vec![0.0; cell_side.cells.len() + 1];
                    for (k, &c) in cell_side.cells.iter().enumerate() {
                        seq[k] += w * (1.0 - f) * c;
                        seq[k + 1] += w * f * c;
                    }
                    pieces.push((cell_side.start + s, seq));
                }
            } else if let Some((s0, raster)) = point_side.rasterize_atoms() {
                pieces.push((cell_side.start + s0, convolve_seq(&raster, &cell_side.cells)));
            }
        }
        let (start, mut cells) = merge_pieces(pieces);
        for c in cells.iter_mut() {
            if *c < 0.0 {
                *c = 0.0;
            }
        }

        let (li, ri) = (self.overflow_left, self.overflow_right);
        let (lo, ro) = (other.overflow_left, other.overflow_right);
        let (si, so) = (self.support_total(), other.support_total());
        // left-right cross terms are booked on the left so that "mass not yet
        // past the right edge" is never underestimated
        let overflow_left = li * (lo + so + ro) + si * lo + ri * lo;
        let overflow_right = ri * (so + ro) + si * ro;
        let mut out = GridMass { step, atoms, start, cells, overflow_left, overflow_right };
        out.trim();
        Ok(out)
    }
}

fn merge_pieces(pieces: Vec<(i64, Vec<f64>)>) -> (i64, Vec<f64>) {
    if pieces.is_empty() {
        return (0, Vec::new());
    }
    if pieces.len() == 1 {
        return pieces.into_iter().next().unwrap();
    }
    let lo = pieces.iter().map(|p| p.0).min().unwrap();
    let hi = pieces.iter().map(|p| p.0 + p.1.len() as i64).max().unwrap();
    let mut out = vec![0.0; (hi - lo) as usize];
    for (s, seq) in pieces {
        let off = (s - lo) as usize;
        for (o, x) in out[off..off + seq.len()].iter_mut().zip(seq) {
            *o += x;
        }
    }
    (lo, out)
}

/// Prefix sums for fast interval-mass queries on a [`GridMass`].
#[derive(Debug, Clone)]
pub struct SlabQuery<'a> {
    mass: &'a GridMass,
    cell_prefix: Vec<f64>,
    atom_prefix: Vec<f64>,
}

impl<'a> SlabQuery<'a> {
    pub fn new(mass: &'a GridMass) -> Self {
        let mut cell_prefix = Vec::with_capacity(mass.cells.len() + 1);
        cell_prefix.push(0.0);
        let mut acc = 0.0;
        for &c in &mass.cells {
            acc += c;
            cell_prefix.push(acc);
        }
        let mut atom_prefix = Vec::with_capacity(mass.atoms.len() + 1);
        atom_prefix.push(0.0);
        let mut acc = 0.0;
        for a in &mass.atoms {
            acc += a.1;
            atom_prefix.push(acc);
        }
        Self { mass, cell_prefix, atom_prefix }
    }

    fn cells_below(&self, t: f64) -> f64 {
        let r = t / self.mass.step - self.mass.start as f64;
        if r <= 0.0 {
            return 0.0;
        }
        let n = self.mass.cells.len();
        if r >= n as f64 {
            return self.cell_prefix[n];
        }
        let k = r.floor() as usize;
        self.cell_prefix[k] + self.mass.cells[k] * (r - k as f64)
    }

    /// Atom mass at locations `< t` (strict) or `<= t` (inclusive), with
    /// snapping tolerance.
    fn atoms_below(&self, t: f64, inclusive: bool) -> f64 {
        let tol = ATOM_TOL * t.abs().max(1.0);
        let idx = if inclusive {
            self.mass.atoms.partition_point(|a| a.0 <= t + tol)
        } else {
            self.mass.atoms.partition_point(|a| a.0 < t - tol)
        };
        self.atom_prefix[idx]
    }

    /// Mass of `(t, t + h]`.
    pub fn half_open(&self, t: f64, h: f64) -> f64 {
        self.cells_below(t + h) - self.cells_below(t) + self.atoms_below(t + h, true) - self.atoms_below(t, true)
    }

    /// Mass of `[t, t + h]`.
    pub fn closed(&self, t: f64, h: f64) -> f64 {
        self.cells_below(t + h) - self.cells_below(t) + self.atoms_below(t + h, true) - self.atoms_below(t, false)
    }
}

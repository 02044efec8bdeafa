//! JSON model configuration.
//!
//! ```json
//! {
//!   "states": ["a", "b"],
//!   "Q": [[0, 2], [0.5, 0]],
//!   "distributions": [[null, "exp(1)"], ["exp(2)", null]],
//!   "grid": {"window": [-10, 60], "step": 0.01},
//!   "tolerances": {"perron": 1e-10, "renewal": 1e-8},
//!   "seeds": {"master": 1}
//! }
//! ```
//!
//! Exactly one of `Q` (quasi-stochastic weights) or `P` (stochastic weights)
//! is given. Every positive weight needs a distribution in the grammar of
//! [`Family::parse`]. Subcommand sections (`renewal`, `solve`, `simulate`,
//! `apps`) are optional.

use std::path::Path;

use markov_renewal::family::Family;
use markov_renewal::kernel::{KernelForm, SemiMarkovKernel};
use markov_renewal::mre::TailDecay;
use markov_renewal::perron::QSMatrix;
use nalgebra::DMatrix;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub window: Option<[f64; 2]>,
    pub step: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub perron: Option<f64>,
    pub renewal: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub master: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenewalSpec {
    /// Slab width for the slab table and Blackwell check.
    pub h: Option<f64>,
    /// Smoothing width for Stone densities.
    pub smooth: Option<f64>,
}

/// Source term of a Markov renewal equation, per state.
#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZSpec {
    Zero,
    /// `1{a <= t < b}`.
    Indicator([f64; 2]),
    /// `P(Y > t) 1{t >= 0}` for a distribution `Y`.
    Survival(String),
    /// `e^{−rate t} 1{t >= 0}`.
    Exp(f64),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSpec {
    pub z: Vec<ZSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    /// 1-based start state.
    pub start: Option<usize>,
    pub steps: Option<usize>,
    pub paths: Option<usize>,
    /// Number of paths written as individual CSV dumps.
    pub dump: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LindleySpec {
    pub bracket: Option<[f64; 2]>,
    pub t_grid: Option<Vec<f64>>,
    pub paths: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchingSpec {
    pub offspring: Vec<Vec<f64>>,
    pub lifetimes: Vec<String>,
    pub horizon: Option<f64>,
    pub step: Option<f64>,
    pub bracket: Option<[f64; 2]>,
    #[serde(default)]
    pub age: bool,
    #[serde(default)]
    pub require_primitive: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerpetuitySpec {
    pub values: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub b: String,
    pub bracket: Option<[f64; 2]>,
    pub samples: Option<usize>,
    pub forward: Option<usize>,
    pub burn_in: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppsSpec {
    pub lindley: Option<LindleySpec>,
    pub branching: Option<BranchingSpec>,
    pub perpetuity: Option<PerpetuitySpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub states: Vec<String>,
    #[serde(rename = "Q")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(rename = "P")]
    pub p: Option<Vec<Vec<f64>>>,
    pub distributions: Option<Vec<Vec<Option<String>>>>,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub renewal: RenewalSpec,
    pub solve: Option<SolveSpec>,
    #[serde(default)]
    pub simulate: SimulateSpec,
    #[serde(default)]
    pub apps: AppsSpec,
}

/// A parsed config with the source text kept for line-anchored messages.
pub struct Config {
    pub path: String,
    text: String,
    pub spec: ModelSpec,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{name}: cannot read config: {e}")))?;
        let spec: ModelSpec =
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{name}:{}:{}: {e}", e.line(), e.column())))?;
        Ok(Self { path: name, text, spec })
    }

    /// Line of the first occurrence of `"key"` in the source, 1-based.
    fn line_of(&self, key: &str) -> usize {
        let pat = format!("\"{key}\"");
        self.text.find(&pat).map_or(1, |pos| self.text[..pos].matches('\n').count() + 1)
    }

    /// Validation error anchored at the line of `key`.
    pub fn error(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        CliError::validation(format!("{}:{}: {msg}", self.path, self.line_of(key)))
    }

    fn matrix(&self) -> Result<(DMatrix<f64>, KernelForm, &'static str), CliError> {
        let (rows, form, key) = match (&self.spec.q, &self.spec.p) {
            (Some(q), None) => (q, KernelForm::Q, "Q"),
            (None, Some(p)) => (p, KernelForm::P, "P"),
            (Some(_), Some(_)) => return Err(self.error("P", "give either Q or P, not both")),
            (None, None) => return Err(CliError::validation(format!("{}:1: missing weight matrix Q or P", self.path))),
        };
        let m = rows.len();
        if m == 0 {
            return Err(self.error(key, format!("{key} is empty")));
        }
        if !self.spec.states.is_empty() && self.spec.states.len() != m {
            return Err(self.error(key, format!("{key} has {m} rows but {} states are listed", self.spec.states.len())));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(self.error(key, format!("row {} of {key} has {} entries, expected {m}", i + 1, r.len())));
            }
            for (j, &x) in r.iter().enumerate() {
                if !(x >= 0.0) || !x.is_finite() {
                    return Err(self.error(key, format!("entry ({}, {}) of {key} is not a finite nonnegative number", i + 1, j + 1)));
                }
            }
            if form == KernelForm::P {
                let s: f64 = r.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(self.error(key, format!("row {} of P sums to {s}, expected 1", i + 1)));
                }
            }
        }
        Ok((DMatrix::from_fn(m, m, |i, j| rows[i][j]), form, key))
    }

    /// The semi-Markov kernel on a grid of the given step.
    pub fn kernel(&self, step: f64) -> Result<SemiMarkovKernel, CliError> {
        let (w, form, key) = self.matrix()?;
        let m = w.nrows();
        let dists = self.spec.distributions.as_ref().ok_or_else(|| self.error(key, "missing distributions"))?;
        if dists.len() != m || dists.iter().any(|r| r.len() != m) {
            return Err(self.error("distributions", format!("distributions must be a {m}x{m} array")));
        }
        let mut fams = Vec::with_capacity(m * m);
        for i in 0..m {
            for j in 0..m {
                let cell = format!("({}, {})", i + 1, j + 1);
                let fam = match &dists[i][j] {
                    Some(s) => Some(Family::parse(s).map_err(|e| self.error("distributions", format!("cell {cell}: {e}")))?),
                    None if w[(i, j)] > 0.0 => {
                        return Err(self.error("distributions", format!("cell {cell}: weight {} has no distribution", w[(i, j)])));
                    }
                    None => None,
                };
                fams.push(if w[(i, j)] > 0.0 { fam } else { None });
            }
        }
        let weights = QSMatrix::new(w).map_err(|e| self.error(key, e))?;
        let mut k = SemiMarkovKernel::from_families(weights, &fams, step).map_err(|e| self.error("distributions", e))?;
        k.form = form;
        Ok(k)
    }

    /// Source functions of the `solve` section, one per state.
    pub fn z_functions(&self, m: usize) -> Result<Vec<ZFun>, CliError> {
        let s = self.spec.solve.as_ref().ok_or_else(|| CliError::validation(format!("{}:1: missing solve section", self.path)))?;
        if s.z.len() != m {
            return Err(self.error("z", format!("z has {} entries, expected one per state ({m})", s.z.len())));
        }
        s.z.iter()
            .enumerate()
            .map(|(i, z)| {
                Ok(match z {
                    ZSpec::Zero => ZFun::Zero,
                    ZSpec::Indicator([a, b]) => ZFun::Indicator(*a, *b),
                    ZSpec::Survival(d) => ZFun::Survival(Family::parse(d).map_err(|e| self.error("z", format!("entry {}: {e}", i + 1)))?),
                    ZSpec::Exp(rate) => ZFun::Exp(*rate),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum ZFun {
    Zero,
    Indicator(f64, f64),
    Survival(Family),
    Exp(f64),
}

impl ZFun {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ZFun::Zero => 0.0,
            ZFun::Indicator(a, b) => f64::from(u8::from(*a <= t && t < *b)),
            ZFun::Survival(_) | ZFun::Exp(_) if t < 0.0 => 0.0,
            ZFun::Survival(f) => f.survival(t),
            ZFun::Exp(rate) => (-rate * t).exp(),
        }
    }

    /// Decay beyond the right window edge. Survival tails past the window
    /// are neglected.
    pub fn right_decay(&self) -> TailDecay {
        match self {
            ZFun::Exp(rate) => TailDecay::Exponential { rate: *rate },
            _ => TailDecay::Zero,
        }
    }
}

/// Common right-tail decay of several source functions: the slowest one.
pub fn slowest_decay(z: &[ZFun]) -> TailDecay {
    z.iter().fold(TailDecay::Zero, |acc, f| match (acc, f.right_decay()) {
        (TailDecay::Exponential { rate: a }, TailDecay::Exponential { rate: b }) => TailDecay::Exponential { rate: a.min(b) },
        (TailDecay::Zero, d) | (d, TailDecay::Zero) => d,
        (d, _) => d,
    })
}

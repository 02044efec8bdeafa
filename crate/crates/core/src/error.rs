use thiserror::Error;

/// Errors raised by the toolkit. Variants name the failing condition, not the
/// module, so callers (the CLI in particular) can map them to exit codes.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("matrix is not irreducible")]
    NotIrreducible,
    #[error("matrix is not primitive")]
    NotPrimitive,
    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("matrix is not quasi-stochastic: spectral radius {rho} differs from 1 by more than {tol:e}")]
    NotQuasiStochastic { rho: f64, tol: f64 },
    #[error("grid step mismatch: {left} vs {right}")]
    GridMismatch { left: f64, right: f64 },
    #[error("exponential moment diverges at lambda = {lambda}")]
    DivergentMoment { lambda: f64 },
    #[error("stationary drift {mu} is not positive")]
    NonPositiveDrift { mu: f64 },
    #[error("stationary drift {mu} is not negative")]
    NonNegativeDriftRequired { mu: f64 },
    #[error("renewal series not truncated after {terms} terms (last term mass {last_mass:e})")]
    TruncationFailure { terms: usize, last_mass: f64 },
    #[error("kernel is arithmetic with span {span}; use lattice increments")]
    ArithmeticKernel { span: f64 },
    #[error("kernel is not spread out")]
    NotSpreadOut,
    #[error("window too small: {0}")]
    WindowTooSmall(String),
    #[error("path has {returns} returns to state {state}, need at least 2")]
    InsufficientVisits { state: usize, returns: usize },
    #[error("no positive root of spectral radius one on [{lo}, {hi}]")]
    NoRoot { lo: f64, hi: f64 },
    #[error("cannot parse distribution `{0}`")]
    Parse(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the numerics (as opposed to malformed input).
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::Invalid(_) | Error::Parse(_) | Error::Io(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

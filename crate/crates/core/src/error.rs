use thiserror::Error;

/// Errors raised by grid construction, operators, models and inference engines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("harmonic field violates Hermitian symmetry (relative deviation {deviation:e})")]
    NonHermitian { deviation: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("log-power {value} in bin {bin} exceeds the overflow guard of {limit}")]
    SpectrumOverflow { bin: usize, value: f64, limit: f64 },

    #[error("conjugate gradient did not converge in {iterations} iterations (residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("conjugate gradient found non-positive curvature {curvature:e} at iteration {iteration}")]
    NegativeCurvature { iteration: usize, curvature: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("objective diverged: {0}")]
    Diverged(String),

    #[error("spectral pole at mode {mode:?} (|denominator| = {modulus:e})")]
    SpectralPole { mode: Vec<i64>, modulus: f64 },

    #[error("I/O error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

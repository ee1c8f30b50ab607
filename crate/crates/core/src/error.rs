use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid potential: {0}")]
    InvalidPotential(String),

    #[error("mirror map is singular at the origin for beta < p")]
    SingularOrigin,

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("data is not linearly separable (best margin {best_margin:e})")]
    Infeasible { best_margin: f64 },

    #[error("non-positive margin {0:e}")]
    NonPositiveMargin(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("loss increased at step {step}: {before:e} -> {after:e}")]
    MonotonicityViolation { step: u64, before: f64, after: f64 },

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: u64 },

    #[error("trace too short: {rows} rows, need at least {needed}")]
    TraceTooShort { rows: usize, needed: usize },

    #[error("trace has no bregman_gap column")]
    MissingGap,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A standing assumption on the material law failed on the sampling grid.
    #[error("assumption violation ({inequality}): {detail}")]
    AssumptionViolation {
        inequality: &'static str,
        detail: String,
    },

    #[error("invalid resolution: {0}")]
    InvalidResolution(String),

    #[error("invalid level: {0}")]
    InvalidLevel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A value-type invariant (positivity, unit mass, zero mean, finiteness).
    #[error("invariant: {0}")]
    Invariant(String),

    #[error("geodesic shot left the positive cone at s = {s}")]
    LeftDomain { s: f64 },

    #[error("stiffness failure at t = {t}: step size {h} underflowed (try a tighter floor or smaller t_end)")]
    StiffnessFailure { t: f64, h: f64 },

    #[error("integrity failure at t = {t}: {detail}")]
    IntegrityFailure { t: f64, detail: String },

    #[error("property violation: {0}")]
    PropertyViolation(String),

    #[error("unsupported law: {0}")]
    UnsupportedLaw(String),

    #[error("construction bug: {0}")]
    ConstructionBug(String),

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit code classes:
/// configuration problems, data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    /// One or more configuration fields failed validation. All violations
    /// are collected before reporting.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Non-finite intermediate or failed linear solve, with the solver
    /// iteration at which it surfaced (0 when outside the fit loop).
    #[error("numeric failure at iteration {iteration}: {detail}")]
    Numeric { iteration: usize, detail: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("serialization: {0}")]
    Serialization(String),

    #[error("flow record version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach a fit-loop iteration index to numeric failures raised by
    /// lower layers; other variants pass through unchanged.
    pub fn at_iteration(self, iteration: usize) -> Self {
        match self {
            Error::Numeric { detail, .. } => Error::Numeric { iteration, detail },
            other => other,
        }
    }
}

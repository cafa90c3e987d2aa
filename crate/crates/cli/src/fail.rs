//! CLI failure classes, one per nonzero exit code.

use std::fmt;

/// What went wrong, coarsely: configuration (exit 2), data (exit 3), or
/// numerics (exit 4).
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<otflow::Error> for Failure {
    fn from(e: otflow::Error) -> Self {
        match &e {
            otflow::Error::Config(_) | otflow::Error::Unsupported(_) => {
                Failure::Config(e.to_string())
            }
            otflow::Error::Numeric { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

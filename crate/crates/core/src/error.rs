use thiserror::Error;

/// Errors produced by the simulator and training harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("malformed compressed gradient: {0}")]
    MalformedMessage(String),

    #[error("infeasible placement: {0}")]
    Infeasible(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("dataset error at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

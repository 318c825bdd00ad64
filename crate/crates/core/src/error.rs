use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("non-finite or nonpositive loss at row {row}: {loss}")]
    InvalidLoss { row: usize, loss: f64 },

    #[error("non-monotone steps at row {row}: step {step} follows {previous}")]
    NonMonotoneStep { row: usize, step: u64, previous: u64 },

    #[error("empty input")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient coverage: {0}")]
    Coverage(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("fit did not converge: {0}")]
    NonConvergence(String),

    #[error("log disappeared: {0}")]
    LogDisappeared(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

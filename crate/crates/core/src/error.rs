use thiserror::Error;

/// Errors raised by the controller, the synthetic source and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A value handed to an operation violates its preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A lockstep step was called with a malformed observation batch.
    #[error("rejected batch step: {0}")]
    BatchRejected(String),

    #[error("no completed trajectory to select a winner from")]
    NoWinner,

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A value or configuration violates a documented contract.
    #[error("validation error: {0}")]
    Validation(String),
    /// NaN or infinite values showed up where finite numbers are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An iterative optimizer diverged.
    #[error("convergence error: {0}")]
    Convergence(String),
    /// A persisted artifact is malformed or has an unexpected layout.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! validation {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}
pub(crate) use validation;

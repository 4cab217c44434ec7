use thiserror::Error;

/// Errors produced by any flowkl operation.
#[derive(Debug, Error)]
pub enum Error {
    /// An input is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An argument violates a structural precondition (lengths, ordering, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// A numeric computation produced a non-finite value.
    #[error("numeric error at step {step}: {msg}")]
    Numeric { step: usize, msg: String },

    /// A serialized payload could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {0}")]
    Training(usize),

    /// A verification assertion failed, naming the offending quantity.
    #[error("verification failed: {0}")]
    Verification(String),

    /// Bad CLI usage (invalid flag combinations, missing inputs).
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

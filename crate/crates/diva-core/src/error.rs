//! Error taxonomy shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A config value is out of its declared range. Names the offending field.
    #[error("configuration error: field `{field}`: {msg}")]
    Config { field: String, msg: String },

    /// A runtime argument violates a precondition (shape mismatch, empty input, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed model input (out-of-range token, over-long sequence).
    #[error("input error: {0}")]
    Input(String),

    /// A caller broke an API contract (wrong flow kind, misaligned batches, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Numerically degenerate input (zero norm, non-finite value).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A training invariant was violated (frozen parameters changed, ...).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Checkpoint or dataset file problem; names the offending field where known.
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::io;

/// Errors produced by the retrieval engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] io::Error),

    /// Bad magic bytes, unknown version or otherwise unparseable header.
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter than the header declares, or out-of-range code values.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("empty store: {0}")]
    EmptyStore(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient training data: need {needed}, have {available}")]
    InsufficientData { needed: usize, available: usize },

    /// The operation needs state that does not exist yet (no positives, no model).
    #[error("not ready: {0}")]
    NotReady(String),

    #[error("degenerate training set: {0}")]
    DegenerateTraining(String),

    /// A positive source could not map a query onto a feed.
    #[error("cannot resolve query {query:?}: {reason}")]
    Resolution { query: String, reason: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

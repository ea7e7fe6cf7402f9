//! Crate-wide error type.

/// Errors surfaced by any module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation was called outside its contract (non-scalar loss,
    /// empty slice, mismatched lengths, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A class or position index is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid model or run configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed or inconsistent dataset content.
    #[error("data error: {0}")]
    Data(String),

    /// A synthesis quota cannot be satisfied from the available singles.
    #[error("quota unsatisfiable: {0}")]
    Quota(String),

    /// Checkpoint is unreadable or incompatible with this build.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

/// Errors surfaced by any public operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension or group misalignment between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration (rank outside the rank space, bad sparsity level, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite values where finite data is required.
    #[error("non-finite data: {0}")]
    Data(String),

    /// A merge or mode invariant would be violated; the operation refuses to proceed.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Malformed checkpoint container.
    #[error("checkpoint format error: {0}")]
    Format(String),

    /// Training diverged (non-finite loss).
    #[error("training error: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents incompatible for an operation; names both shapes.
    #[error("{op}: incompatible shapes {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API contract was violated (non-scalar loss, mixed tapes, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or training configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite values where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Lookup index outside its valid range.
    #[error("index error: {what} {index} out of range 0..{bound} at position {position}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
        position: usize,
    },

    /// Unknown or out-of-range class label.
    #[error("label error: {0}")]
    Label(String),

    /// Corpus file does not satisfy the wire schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Checkpoint container malformed or inconsistent.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

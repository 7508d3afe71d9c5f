//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any tokenmill operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors had incompatible shapes for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor was constructed or reshaped with an invalid shape.
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    /// Every position of an attention row was masked out.
    #[error("fully masked attention row {row}")]
    FullyMaskedRow { row: usize },

    /// Cosine similarity was requested against a zero-norm token.
    #[error("zero-norm token at index {index}")]
    ZeroNormToken { index: usize },

    /// A caller-supplied parameter violated an operation's precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A configuration key held an unusable value.
    #[error("configuration error for `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// A function evaluation produced NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The weight archive does not contain a required tensor.
    #[error("missing tensor `{0}` in archive")]
    MissingTensor(String),

    /// The weight archive is structurally invalid.
    #[error("archive format error: {0}")]
    Archive(String),

    /// Grounding markup failed to parse or validate.
    #[error("markup error at byte {offset}: {message}")]
    Markup { offset: usize, message: String },

    /// An internal consistency check failed.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("record error: {0}")]
    Record(String),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared by the tensor engine and the model blocks built on it.

use thiserror::Error;

/// Everything that can go wrong while building or running a computation graph.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Two operands whose shapes cannot be combined by the requested op.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single tensor whose shape is unusable for the requested op.
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// Non-finite values where the op requires finite input.
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },

    /// An index (label, token id, row, …) outside its valid range.
    #[error("{what}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// A configuration value outside its documented domain.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// backward() was already consumed for this graph; record a fresh graph.
    #[error("backward() may run at most once per recorded graph")]
    BackwardConsumed,

    /// A sequence longer than the configured maximum.
    #[error("{what}: length {len} exceeds maximum {max}")]
    TooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },

    /// Checkpoint file I/O failure.
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed checkpoint contents.
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

//! Error type shared by the tensor kernels and the checkpoint codec.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Two tensors disagree on one named axis. The axis is named so shape
    /// bugs surface as "channels: expected 32, got 16" instead of a bare
    /// index.
    #[error("{context}: axis `{axis}` expected {expected}, got {got}")]
    AxisMismatch {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{context}: expected rank-{expected} tensor, got rank {got}")]
    RankMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{context}: shape {shape:?} needs {expected} elements, buffer has {got}")]
    DataLength {
        context: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("{context}: {what}")]
    InvalidArg {
        context: &'static str,
        what: String,
    },

    /// Height (or another partitioned axis) does not divide into the
    /// requested number of strips.
    #[error("{context}: axis of size {len} does not split into {parts} equal strips")]
    Partition {
        context: &'static str,
        len: usize,
        parts: usize,
    },

    #[error("batchnorm in train mode needs at least 2 rows, got {got}")]
    BatchTooSmall { got: usize },

    #[error("backward() needs a scalar loss node, got {len} elements")]
    NonScalarLoss { len: usize },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint manifest line {line}: {msg}")]
    CheckpointFormat { line: usize, msg: String },

    #[error("checkpoint mismatch for `{name}`: {msg}")]
    CheckpointMismatch { name: String, msg: String },
}

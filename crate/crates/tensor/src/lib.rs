//! Minimal dense-tensor library with reverse-mode autodiff.
//!
//! Everything the training stack differentiates goes through [`Graph`]: ops
//! append nodes to a tape, each node optionally carrying a backward closure.
//! Values are plain row-major `Vec<E>` buffers; no views, no broadcasting
//! beyond what the individual ops implement. Determinism is a hard
//! requirement, so every kernel walks its loops in a fixed order and nothing
//! here spawns threads.

pub mod checkpoint;
pub mod error;
pub mod fdcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use error::{Result, TensorError};
pub use fdcheck::{finite_diff_check, FdOptions};
pub use graph::{BackwardFn, Graph, GradSink, Mode, NodeId, OpCtx};
pub use tensor::{elem, Element, Tensor};

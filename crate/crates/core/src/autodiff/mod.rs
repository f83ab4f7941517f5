//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations as they are evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the recording in reverse and
//! returns exact gradients for every leaf; leaves the loss does not depend
//! on report zero.
//!
//! Tapes are single-threaded. Separate tapes share nothing, so episodes can
//! be differentiated concurrently and their gradients summed afterwards.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operator set is deliberately small: what the attention model and the
//! regularizers need, plus a [`CustomOp`] hook for operators with a
//! hand-derived backward rule (soft-DTW, pairwise distances, row norms).

mod check;
mod graph;
mod tensor;


pub use check::{grad_check, grad_check_with, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub(crate) use graph::stable_lse;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank-{rank} tensor")]
    UnknownAxis { axis: usize, rank: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a [1]-shaped loss, got {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}

//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Graphs are built define-by-run: every call on [`Graph`] computes its value
//! immediately and records the operation so that [`Graph::backward`] can
//! replay it in reverse. Only the handful of operations the tiny language
//! model and the preference objectives need are provided.

mod graph;
mod tensor;

pub mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs product-many values, got {found}")]
    ValueCount { shape: Vec<usize>, found: usize },
    #[error("{op}: unsupported rank for shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

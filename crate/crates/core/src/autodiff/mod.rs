//! Minimal reverse-mode differentiation over `f32` tensors.
//!
//! Values are stored in `f32`; reductions accumulate in `f64`. A [`Graph`]
//! is built fresh for every training step and thrown away afterwards;
//! persistent weights live in a [`ParamSet`] and are bound onto the graph as
//! trainable leaves.

mod graph;
pub(crate) mod kernels;
mod optim;
mod tensor;

use thiserror::Error;

pub use graph::{Graph, Var};
pub use kernels::RoiRegion;
pub use optim::{Adam, AdamConfig, BoundParams, ParamSet};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}

//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is a valid topological order. [`Graph::backward`]
//! walks the tape once in reverse and accumulates gradients; parameters
//! shared across several uses receive the sum of all contributions.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{Ctx, Grads, ParamId, ParamStore};
pub use tensor::num_like::FloatOps;
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    BackwardTwice,
}

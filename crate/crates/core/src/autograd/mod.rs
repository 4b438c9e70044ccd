//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Graphs are built eagerly as ops execute. [`grad`] walks a graph backwards
//! and, with `create_graph`, records the backward pass itself so that
//! meta-gradients through an inner gradient step are exact.

mod ops;
mod real;
mod tensor;
mod var;

pub use ops::*;
pub use real::Real;
pub use tensor::Tensor;
pub use var::{grad, Var};

/// Rows of `x` along axis 0, in `idx` order.
pub fn gather_batch<T: Real>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    tensor::gather_axis0(x, idx)
}

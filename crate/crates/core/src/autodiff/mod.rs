//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! The op set is deliberately small: matmul, broadcast add/multiply, ReLU,
//! row L2 normalization, row softmax, clamped log, sum/mean reductions and
//! column concatenation.

pub mod checkpoint;
mod graph;
mod params;
mod tensor;

pub use graph::{forward, Graph, GraphBuilder, NodeId, Op, Session, LOG_FLOOR};
pub(crate) use graph::{matmul, softmax_in_place};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Every op is deterministic: batch-parallel kernels reduce their partial
//! results in sample order, so results do not depend on thread scheduling.

pub mod check;
mod graph;
mod kernels;
mod real;
mod tensor;

pub use graph::{BatchStats, CustomOp, Gradients, Graph, Unary, Var};
pub use real::{gemm, Real};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves created with
//! [`Graph::param`] receive gradients from [`Graph::backward`]; leaves created
//! with [`Graph::constant`] do not. Only row-vector bias addition broadcasts;
//! every other shape mismatch is an error.

mod attention;
mod graph;
mod optim;
mod real;
mod tensor;

pub use attention::{multi_head_attention, AttentionOutput, AttentionWeights};
pub use graph::{Graph, Var};
pub use optim::{adamw_step, sgd_momentum_step, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use real::{gemm, Real};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
}

#[cfg(test)]
mod tests;

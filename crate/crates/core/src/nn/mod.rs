//! Dense float64 tensors with reverse-mode differentiation, the layers used
//! by the actor/critic networks and the risk predictor, and Adam.

mod adam;
pub mod checkpoint;
mod gemm;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use graph::{expect_shape, Gradients, Graph, Var};
pub use layers::{attention_with_bias, scaled_scores, LayerNorm, Linear, Mlp, MultiHeadAttention, QueryRows};
pub use params::{Bound, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use graph::softmax_rows;
pub(crate) use graph::{sigmoid, softplus};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod gradcheck_tests;

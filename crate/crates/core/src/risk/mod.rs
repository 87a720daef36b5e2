//! Collision-risk classifier over the most recent state-action pairs:
//! a pre-norm transformer encoder whose attention scores carry a linear
//! recency bias, followed by a small MLP head and a sigmoid.

mod model;
mod sequence;

pub use model::{AttentionMaps, RiskConfig, RiskModel};
pub use sequence::StateActionSequence;

use crate::nn::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum RiskError {
    #[error("sequence shape: {0}")]
    Shape(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("empty batch")]
    EmptyBatch,
    #[error("unlabeled sequence in training batch")]
    Unlabeled,
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// Recency bias `B[i][j] = beta * (j - (n - 1))`: zero on the newest column,
/// growing more negative toward older positions, identical for every row.
pub fn build_bias(n: usize, beta: f64) -> Tensor {
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        for j in 0..n {
            data.push(beta * (j as f64 - (n as f64 - 1.0)));
        }
    }
    Tensor::new(&[n, n], data).expect("bias shape")
}

//! Minimal deterministic reverse-mode differentiation for 1-D CNNs.
//!
//! Everything runs in `f64`. Kernels are deterministic: the same inputs give
//! bit-identical outputs and gradients regardless of thread count.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod loss;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use loss::{homoscedastic_loss, LossWeights};
pub use optim::{adamw_step, plateau_lr, AdamWConfig, PlateauConfig, PlateauScheduler};
pub use params::{he_uniform, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Elementwise `max(0, x)`.
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `-log softmax(logits)[target]`, stabilized by max subtraction.
pub fn softmax_ce(logits: &[f64], target: usize) -> f64 {
    graph::neg_log_softmax(logits, target)
}

/// Same as [`crate::spectral::mse`] for raw slices of equal length.
pub fn mse_loss(a: &[f64], b: &[f64]) -> crate::Result<f64> {
    crate::spectral::mse(a, b)
}

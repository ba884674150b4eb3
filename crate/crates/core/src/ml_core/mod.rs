//! Dense feed-forward models, split-layer passes and synthetic data.

mod data;
mod matrix;
mod model;

pub use data::{gen_synthetic_dataset, ground_truth, heldout_dataset, partition, DataSpec, Dataset, Task};
pub use matrix::Matrix;
pub use model::{
    apply_update, backward, backward_segment, check_targets, compute_pseudo_residuals, forward,
    forward_segment, forward_segment_cached, loss_gradient, loss_value, reassemble,
    residual_to_output_gradient, split_model, Activation, ForwardCache, GradientSet, Layer,
    LayerGrad, LossKind, Model, ModelKind, ModelSegment, ModelSpec, Parameterized,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at layer {layer}")]
    Numeric { layer: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("no cached forward pass for layers [{lo}, {hi})")]
    MissingCache { lo: usize, hi: usize },
    #[error("invalid cut: {0}")]
    InvalidCut(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid data spec: {0}")]
    InvalidData(String),
    #[error("binary cross-entropy targets must be 0 or 1")]
    InvalidTargets,
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("empty {0}")]
    Empty(&'static str),
}

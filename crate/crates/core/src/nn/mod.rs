//! Dense float64 neural-network kernels with hand-written backpropagation.

pub mod adamw;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;

use thiserror::Error;

pub use adamw::{adamw_step, AdamWConfig};
pub use gradcheck::{grad_check, relative_error, Corruption, GradCheckReport};
pub use io::{load_model, save_model, WeightsManifest};
pub use loss::{bce_loss, bce_with_logits, mean_bce_with_logits};
pub use model::{infer_shapes, LayerSpec, ModelParams, ParamEntry, Sequential};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("weights manifest: {0}")]
    Manifest(String),
    #[error("i/o: {0}")]
    Io(String),
}

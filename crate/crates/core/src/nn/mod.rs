//! Small dense networks with exact reverse-mode gradients.
//!
//! Inputs are sparse multi-hot feature vectors (active indices from
//! [`crate::features::Featurizer`]), hidden layers use ReLU and the last layer
//! emits one logit per action. Everything is `f64` and single threaded, so a
//! fixed seed gives bitwise-identical training.

mod checkpoint;
mod gradcheck;
mod loss;
mod net;
mod optim;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, NetHeader};
pub use gradcheck::grad_check;
pub use loss::{loss_ce, loss_td, loss_wce, softmax, softmax_rows, wce_targets, Loss};
pub use net::{DenseNet, Features};
pub use optim::{Adam, TargetCopy};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target {value} at index {index} outside [0, 1]")]
    TargetRange { index: usize, value: f64 },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("finite-difference step {0} outside [1e-6, 1e-4]")]
    Eps(f64),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Small neural-network toolkit: tensors, layers with hand-written
//! backward passes, losses, Adam and finite-difference gradient checks.
//!
//! Batched tensors put the batch first: `[batch, features]` for vectors and
//! `[batch, steps, channels]` for sequences.

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod network;
mod optim;
mod recurrent;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_FORMAT};
pub use gradcheck::{grad_check, grad_check_against, GradCheckReport, LayerCheck, Offender, FD_STEP};
pub use layers::{Cache, Layer, LayerSpec};
pub use loss::{categorical_cross_entropy, mean_squared_error, Loss, PROB_FLOOR};
pub use network::{Gradients, Network};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tensor::Tensor;

use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid layer: {0}")]
    InvalidLayer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Forward-pass mode. Only training draws random numbers (dropout masks).
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

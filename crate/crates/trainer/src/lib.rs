//! Surrogate-gradient training for the spiking networks of
//! `spikesplit-core`.
//!
//! Backpropagation runs through time over the recorded membrane traces. The
//! spike nonlinearity uses a rectangular surrogate derivative and the hard
//! reset factor `(1 - o)` is treated as a constant. Training follows two
//! steps: the plain network first, then jointly with a bottleneck inserted
//! at the split point.

pub mod backward;
pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod train;

pub use backward::{backward, cross_entropy, Grads};
pub use checkpoint::Checkpoint;
pub use data::{gaussian_blobs, Dataset};
pub use optim::{cosine_lr, Sgd};
pub use train::{
    accuracy_drop, evaluate, evaluate_checkpoint, train_epochs, train_two_step, EpochMetrics, ToyTaskSpec, TwoStepReport,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] spikesplit_core::Error),
    #[error("loss diverged at step {step}, epoch {epoch}, batch {batch}: {loss}")]
    Diverged {
        step: u8,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("missing recorded state: {0}")]
    MissingState(String),
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchMismatch { expected: String, found: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing gradient for `{0}`")]
    MissingGradient(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

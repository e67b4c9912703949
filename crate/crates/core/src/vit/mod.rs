//! Toy-scale ViT / DeiT: model, training loop, FLOPs accounting and checkpoints.

pub mod checkpoint;
mod config;
pub(crate) mod encoder;
pub mod flops;
mod model;
pub mod params;
mod patch;
pub mod train;

pub use config::{ToySize, ViTConfig};
pub use encoder::{top_k_indices, TapeTrace};
pub use flops::{count_flops, default_stages, KeepSchedule};
pub use model::{label_of, ForwardTrace, Model, EMBED_INIT_STD};
pub use patch::{patch_indices, patchify, unpatchify};
pub use train::{train, DistillSpec, EpochStats, History, LossWeights, TapeModel, TrainConfig};

pub(crate) use encoder::LN_EPS;
pub(crate) use model::{check_image, cross_entropy};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("image shape {got:?} does not match expected {expected:?}")]
    ImageShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dataset has no training samples")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("attack split sample {0} reached a training phase")]
    AttackSplitInTraining(usize),
    #[error("incompatible distillation: {0}")]
    IncompatibleDistill(String),
}

//! Model compression passes. Each produces a [`ModelVariant`](crate::variant::ModelVariant).

pub mod multiplex;
pub mod prune;
pub mod quant;

pub use multiplex::{multiplex, MiniModel, MiniParams};
pub use prune::{masked_attention, prunify, train_dynamic, DynamicModel};
pub use quant::{quantize_dynamic, quantized_linear, QTensor, QuantModel};

use crate::data::Dataset;
use crate::variant::ModelVariant;
use crate::vit::train::{distill, DistillSpec, History, LossWeights, TrainConfig};
use crate::vit::{Model, ModelError};

/// Serialized checkpoint payload size, header excluded.
pub fn model_size_bytes(variant: &ModelVariant) -> usize {
    variant.checkpoint().payload_bytes()
}

/// DeiT-style born-again student: the teacher's architecture plus a
/// distillation token, trained from scratch with labels on the CLS head and
/// the teacher's softened logits on the distillation head.
pub fn born_again(
    teacher: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    weights: LossWeights,
    temperature: f32,
    seed: u64,
) -> Result<(Model, History), ModelError> {
    let mut student = Model::new(teacher.config().clone().with_distill_token(true), seed)?;
    let spec = DistillSpec { teacher, weights, temperature };
    let history = distill(&spec, &mut student, data, cfg)?;
    Ok((student, history))
}

/// Multiplexes `teacher` and recovers accuracy by distilling from it.
pub fn distill_multiplexed(
    teacher: &Model,
    group_size: usize,
    data: &Dataset,
    cfg: &TrainConfig,
    weights: LossWeights,
    temperature: f32,
) -> Result<(MiniModel, History), ModelError> {
    let mut mini = multiplex(teacher, group_size)?;
    let spec = DistillSpec { teacher, weights, temperature };
    let history = distill(&spec, &mut mini, data, cfg)?;
    Ok((mini, history))
}

//! Uniform handle over float and compressed models.

use crate::compress::{DynamicModel, MiniModel, QuantModel};
use crate::tensor::{argmax, Tensor};
use crate::vit::checkpoint::{float_checkpoint, model_from_checkpoint, Checkpoint, CheckpointError, VariantStanza};
use crate::vit::flops::count_flops;
use crate::vit::train::input_gradient;
use crate::vit::{Model, ModelError, ViTConfig};

#[derive(Debug, thiserror::Error)]
pub enum VariantError {
    #[error("{0} models do not expose gradients")]
    GradientUnavailable(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelVariant {
    Float(Model),
    Quantized(QuantModel),
    Dynamic(DynamicModel),
    Mini(MiniModel),
}

impl ModelVariant {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelVariant::Float(m) if m.config().use_distill_token => "distilled",
            ModelVariant::Float(_) => "float",
            ModelVariant::Quantized(_) => "quantized",
            ModelVariant::Dynamic(_) => "pruned",
            ModelVariant::Mini(_) => "multiplexed",
        }
    }

    pub fn config(&self) -> &ViTConfig {
        match self {
            ModelVariant::Float(m) => m.config(),
            ModelVariant::Quantized(m) => m.config(),
            ModelVariant::Dynamic(m) => m.config(),
            ModelVariant::Mini(m) => m.config(),
        }
    }

    /// Fused logits (mean of both heads when a distillation head exists).
    pub fn logits(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        let trace = match self {
            ModelVariant::Float(m) => m.forward(image, false)?,
            ModelVariant::Quantized(m) => m.forward(image)?,
            ModelVariant::Dynamic(m) => m.forward(image, false)?,
            ModelVariant::Mini(m) => m.forward(image, false)?,
        };
        Ok(trace.fused_logits())
    }

    /// Argmax of the fused logits, lowest index on ties.
    pub fn classify(&self, image: &Tensor) -> Result<usize, ModelError> {
        Ok(argmax(self.logits(image)?.data()))
    }

    pub fn has_gradient(&self) -> bool {
        !matches!(self, ModelVariant::Quantized(_))
    }

    /// Gradient of cross-entropy with respect to the input image.
    pub fn input_gradient(&self, image: &Tensor, label: usize) -> Result<Tensor, VariantError> {
        Ok(match self {
            ModelVariant::Float(m) => input_gradient(m, image, label)?,
            ModelVariant::Dynamic(m) => input_gradient(m, image, label)?,
            ModelVariant::Mini(m) => input_gradient(m, image, label)?,
            ModelVariant::Quantized(_) => return Err(VariantError::GradientUnavailable(self.kind())),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            ModelVariant::Float(m) => float_checkpoint(m),
            ModelVariant::Quantized(m) => m.checkpoint(),
            ModelVariant::Dynamic(m) => m.checkpoint(),
            ModelVariant::Mini(m) => m.checkpoint(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.checkpoint().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let ck = Checkpoint::from_bytes(bytes)?;
        Ok(match ck.variant {
            VariantStanza::Float => {
                let mut cursor = 0;
                let m = model_from_checkpoint(&ck, &mut cursor)?;
                if cursor != ck.tensors.len() {
                    return Err(CheckpointError::Mismatch("unexpected trailing tensors".into()));
                }
                ModelVariant::Float(m)
            }
            VariantStanza::Quantized => ModelVariant::Quantized(QuantModel::from_checkpoint(&ck)?),
            VariantStanza::Pruned { .. } => ModelVariant::Dynamic(DynamicModel::from_checkpoint(&ck)?),
            VariantStanza::Multiplexed { .. } => ModelVariant::Mini(MiniModel::from_checkpoint(&ck)?),
        })
    }

    /// Analytic forward FLOPs (multiply-adds), pruning schedule included.
    pub fn flops(&self) -> u64 {
        match self {
            ModelVariant::Dynamic(m) => count_flops(m.config(), Some(&m.schedule())),
            other => count_flops(other.config(), None),
        }
    }
}

impl From<Model> for ModelVariant {
    fn from(m: Model) -> Self {
        ModelVariant::Float(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{multiplex, prunify, quantize_dynamic};

    fn variants() -> Vec<ModelVariant> {
        let m = Model::new(ViTConfig::toy_small(), 1).unwrap();
        vec![
            ModelVariant::Quantized(quantize_dynamic(&m)),
            ModelVariant::Dynamic(prunify(&m, 0.7, &[1, 2, 3], 2).unwrap()),
            ModelVariant::Mini(multiplex(&m, 2).unwrap()),
            ModelVariant::Float(Model::new(ViTConfig::toy_small().with_distill_token(true), 3).unwrap()),
            ModelVariant::Float(m),
        ]
    }

    #[test]
    fn every_variant_round_trips_through_bytes() {
        for v in variants() {
            let bytes = v.to_bytes();
            let back = ModelVariant::from_bytes(&bytes).unwrap();
            assert_eq!(back, v, "{}", v.kind());
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn only_quantized_lacks_gradients() {
        let img = Tensor::full(&ViTConfig::toy_small().image_shape(), 0.5);
        for v in variants() {
            let g = v.input_gradient(&img, 0);
            if v.kind() == "quantized" {
                assert!(matches!(g, Err(VariantError::GradientUnavailable(_))));
            } else {
                assert_eq!(g.unwrap().shape(), img.shape());
            }
        }
    }

    #[test]
    fn quantized_checkpoint_ratio() {
        let m = Model::new(ViTConfig::toy_small(), 1).unwrap();
        let f = crate::compress::model_size_bytes(&ModelVariant::Float(m.clone())) as f64;
        let q = crate::compress::model_size_bytes(&ModelVariant::Quantized(quantize_dynamic(&m))) as f64;
        assert!((3.4..=4.0).contains(&(f / q)), "{}", f / q);
    }
}

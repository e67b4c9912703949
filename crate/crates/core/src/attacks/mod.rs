//! Adversarial attacks against any model variant.
//!
//! Black-box attacks take an [`Oracle`], which can only answer label/logit
//! queries; the white-box UAP needs a [`Classifier`], which adds input
//! gradients. A quantized model is an `Oracle` whose gradient query fails
//! with a typed error, so it can be attacked black-box but not crafted on.

mod noise;
mod spatial;
mod uap;

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{argmax, Tensor};
use crate::variant::{ModelVariant, VariantError};
use crate::vit::{Model, ModelError};

pub use noise::{blend_direction, blended_noise_attack, salt_pepper_attack};
pub use spatial::{rotate, spatial_attack, translate, SpatialGrid};
pub use uap::{apply_perturbation, fooling_rate, random_sign_perturbation, uap_craft, Perturbation, UapConfig};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gradient(#[from] VariantError),
    #[error("invalid attack parameter: {0}")]
    Param(String),
}

/// Label/logit queries only.
pub trait Oracle {
    fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError>;

    /// Argmax of [`Oracle::logits`], lowest index on ties.
    fn label(&self, x: &Tensor) -> Result<usize, ModelError> {
        Ok(argmax(self.logits(x)?.data()))
    }
}

/// An oracle that may also expose input gradients of the cross-entropy loss.
pub trait Classifier: Oracle {
    fn loss_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor, VariantError>;

    fn has_gradient(&self) -> bool {
        true
    }

    fn kind_name(&self) -> &'static str {
        "float"
    }
}

impl Oracle for ModelVariant {
    fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        ModelVariant::logits(self, x)
    }
}

impl Classifier for ModelVariant {
    fn loss_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor, VariantError> {
        self.input_gradient(x, label)
    }

    fn has_gradient(&self) -> bool {
        ModelVariant::has_gradient(self)
    }

    fn kind_name(&self) -> &'static str {
        self.kind()
    }
}

impl Oracle for Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward(x, false)?.fused_logits())
    }
}

impl Classifier for Model {
    fn loss_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor, VariantError> {
        Ok(self.input_gradient(x, label)?)
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        (**self).logits(x)
    }
}

/// Counts every query forwarded to the wrapped oracle.
pub struct QueryCounter<'a, O: ?Sized> {
    inner: &'a O,
    count: Cell<usize>,
}

impl<'a, O: Oracle + ?Sized> QueryCounter<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        Self { inner, count: Cell::new(0) }
    }

    pub fn queries(&self) -> usize {
        self.count.get()
    }
}

impl<O: Oracle + ?Sized> Oracle for QueryCounter<'_, O> {
    fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.count.set(self.count.get() + 1);
        self.inner.logits(x)
    }
}

/// What the attack changed when it first succeeded. Failed attacks report
/// `Identity` and return the input unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackParam {
    Identity,
    Transform { angle_deg: f32, dx: i32, dy: i32 },
    NoiseFraction { p: f32, flipped: usize },
    Blend { alpha: f32, direction: usize, l2: f32 },
    Universal { epsilon: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackOutcome {
    #[serde(skip)]
    pub x_adv: Tensor,
    pub success: bool,
    pub queries: usize,
    pub param: AttackParam,
}

impl AttackOutcome {
    /// Re-queries `model` on `x_adv` against the true label.
    pub fn verify<O: Oracle + ?Sized>(&self, model: &O, label: usize) -> Result<bool, ModelError> {
        Ok(model.label(&self.x_adv)? != label)
    }
}

/// True iff the model labels `x_adv` differently from `x`. No caching.
pub fn verify_adversarial<O: Oracle + ?Sized>(model: &O, x: &Tensor, x_adv: &Tensor) -> Result<bool, ModelError> {
    if x.shape() != x_adv.shape() {
        return Err(ModelError::ImageShape { expected: x.shape().to_vec(), got: x_adv.shape().to_vec() });
    }
    Ok(model.label(x_adv)? != model.label(x)?)
}

/// Per-input RNG stream: the attack seed picks the key, the input index the stream.
pub fn input_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// JSON-configurable attack stanza.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackKind {
    Spatial {
        #[serde(default = "yes")]
        do_rotations: bool,
        #[serde(default = "yes")]
        do_translations: bool,
        #[serde(default = "SpatialGrid::default_rot_range")]
        rot_range: f32,
        #[serde(default = "SpatialGrid::default_trans_range")]
        trans_range: f32,
        #[serde(default = "SpatialGrid::default_rot_steps")]
        rot_steps: usize,
        #[serde(default = "SpatialGrid::default_trans_steps")]
        trans_steps: usize,
    },
    SaltPepper {
        #[serde(default = "default_sp_steps")]
        steps: usize,
    },
    BlendedNoise {
        #[serde(default = "default_directions")]
        directions: usize,
        #[serde(default = "default_blend_steps")]
        steps: usize,
    },
    Uap(UapConfig),
}

fn yes() -> bool {
    true
}
fn default_sp_steps() -> usize {
    50
}
fn default_directions() -> usize {
    5
}
fn default_blend_steps() -> usize {
    20
}

impl AttackKind {
    pub fn spatial_default() -> Self {
        let g = SpatialGrid::default();
        AttackKind::Spatial {
            do_rotations: g.do_rotations,
            do_translations: g.do_translations,
            rot_range: g.rot_range,
            trans_range: g.trans_range,
            rot_steps: g.rot_steps,
            trans_steps: g.trans_steps,
        }
    }

    pub fn salt_pepper_default() -> Self {
        AttackKind::SaltPepper { steps: default_sp_steps() }
    }

    pub fn blended_default() -> Self {
        AttackKind::BlendedNoise { directions: default_directions(), steps: default_blend_steps() }
    }

    /// The three black-box attacks, in report column order.
    pub fn black_box_defaults() -> Vec<Self> {
        vec![Self::spatial_default(), Self::salt_pepper_default(), Self::blended_default()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Spatial { .. } => "spatial",
            AttackKind::SaltPepper { .. } => "salt_pepper",
            AttackKind::BlendedNoise { .. } => "blended_noise",
            AttackKind::Uap(_) => "uap",
        }
    }

    pub fn is_white_box(&self) -> bool {
        matches!(self, AttackKind::Uap(_))
    }

    /// Runs a black-box attack on one input. UAP is dataset-level; see [`uap_craft`].
    pub fn run_black_box<O: Oracle + ?Sized>(
        &self,
        model: &O,
        x: &Tensor,
        label: usize,
        seed: u64,
    ) -> Result<AttackOutcome, AttackError> {
        match *self {
            AttackKind::Spatial { do_rotations, do_translations, rot_range, trans_range, rot_steps, trans_steps } => {
                let grid = SpatialGrid { do_rotations, do_translations, rot_range, trans_range, rot_steps, trans_steps };
                spatial_attack(model, x, label, &grid)
            }
            AttackKind::SaltPepper { steps } => salt_pepper_attack(model, x, label, steps, seed),
            AttackKind::BlendedNoise { directions, steps } => blended_noise_attack(model, x, label, directions, steps, seed),
            AttackKind::Uap(_) => Err(AttackError::Param("uap is a dataset-level attack".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(flatten)]
    pub kind: AttackKind,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn id(&self) -> String {
        format!("{}@{}", self.kind.name(), self.seed)
    }
}


#[cfg(test)]
mod tests {
    use super::test_oracles::*;
    use super::*;
    use crate::compress::quantize_dynamic;
    use crate::vit::ViTConfig;
    use rand::Rng;

    #[test]
    fn counter_counts_queries() {
        let o = Brightness(0.5);
        let c = QueryCounter::new(&o);
        c.label(&gray(0.2)).unwrap();
        c.logits(&gray(0.2)).unwrap();
        assert_eq!(c.queries(), 2);
    }

    #[test]
    fn verify_identity_is_false() {
        let o = Brightness(0.5);
        assert!(!verify_adversarial(&o, &gray(0.7), &gray(0.7)).unwrap());
        assert!(verify_adversarial(&o, &gray(0.7), &gray(0.2)).unwrap());
        assert!(verify_adversarial(&o, &gray(0.7), &Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn verify_agrees_with_double_query() {
        let m = Model::new(ViTConfig::toy_small(), 5).unwrap();
        let mut rng = input_rng(9, 0);
        let shape = ViTConfig::toy_small().image_shape();
        for _ in 0..1000 {
            let x = Tensor::from_fn(&shape, |_| rng.gen());
            let sigma: f32 = rng.gen_range(0.0..0.5);
            let noise = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
            let xa = x.zip_map(&noise, |a, n| (a + sigma * n).clamp(0.0, 1.0)).unwrap();
            let direct = m.classify(&xa).unwrap() != m.classify(&x).unwrap();
            assert_eq!(verify_adversarial(&m, &x, &xa).unwrap(), direct);
        }
    }

    #[test]
    fn quantized_variant_has_no_gradient_capability() {
        let m = Model::new(ViTConfig::toy_small(), 1).unwrap();
        let q = ModelVariant::Quantized(quantize_dynamic(&m));
        let x = Tensor::full(&ViTConfig::toy_small().image_shape(), 0.5);
        assert!(matches!(q.loss_gradient(&x, 0), Err(VariantError::GradientUnavailable(_))));
        assert_eq!(Oracle::label(&q, &x).unwrap(), q.classify(&x).unwrap());
    }

    #[test]
    fn attack_config_json() {
        let cfg: AttackConfig = serde_json::from_str(r#"{"kind":"salt_pepper","seed":3}"#).unwrap();
        assert_eq!(cfg, AttackConfig::new(AttackKind::SaltPepper { steps: 50 }, 3));
        let uap: AttackConfig = serde_json::from_str(r#"{"kind":"uap","epsilon":0.03}"#).unwrap();
        assert!(uap.kind.is_white_box());
        for k in AttackKind::black_box_defaults() {
            let c = AttackConfig::new(k, 1);
            let back: AttackConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
        assert!(serde_json::from_str::<AttackConfig>(r#"{"kind":"fgsm"}"#).is_err());
    }

    #[test]
    fn outcome_json_carries_param_and_queries() {
        let o = AttackOutcome {
            x_adv: gray(0.1),
            success: true,
            queries: 4,
            param: AttackParam::NoiseFraction { p: 0.25, flipped: 16 },
        };
        let v: serde_json::Value = serde_json::to_value(&o).unwrap();
        assert_eq!(v["queries"], 4);
        assert_eq!(v["param"]["kind"], "noise_fraction");
        assert_eq!(v["param"]["flipped"], 16);
    }
}

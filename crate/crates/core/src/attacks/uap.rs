//! Universal adversarial perturbation by projected sign-gradient ascent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttackError, Classifier, Oracle};
use crate::tensor::Tensor;
use crate::variant::VariantError;
use crate::vit::ModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UapConfig {
    /// L∞ budget.
    pub epsilon: f32,
    #[serde(default = "UapConfig::default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "UapConfig::default_step")]
    pub step_size: f32,
}

impl UapConfig {
    fn default_epochs() -> usize {
        10
    }
    fn default_step() -> f32 {
        1.0 / 255.0
    }

    pub fn new(epsilon: f32) -> Self {
        Self { epsilon, max_epochs: Self::default_epochs(), step_size: Self::default_step() }
    }
}

/// One image-shaped vector shared by every input; ‖v‖∞ ≤ epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub v: Tensor,
    pub epsilon: f32,
    /// Fraction of the crafting set whose label changes under `v`.
    pub fooling_rate: f32,
    pub epochs: usize,
}

impl Perturbation {
    pub fn linf(&self) -> f32 {
        self.v.max_abs()
    }
}

/// clip(x + v, 0, 1).
pub fn apply_perturbation(x: &Tensor, v: &Tensor) -> Tensor {
    x.zip_map(v, |a, b| (a + b).clamp(0.0, 1.0)).expect("perturbation matches image shape")
}

/// Fraction of `images` whose label under `model` changes when `v` is added.
pub fn fooling_rate<O: Oracle + ?Sized>(model: &O, images: &[Tensor], v: &Tensor) -> Result<f32, ModelError> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut fooled = 0;
    for x in images {
        if model.label(&apply_perturbation(x, v))? != model.label(x)? {
            fooled += 1;
        }
    }
    Ok(fooled as f32 / images.len() as f32)
}

/// Baseline: independent ±epsilon entries.
pub fn random_sign_perturbation(shape: &[usize], epsilon: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.5) { epsilon } else { -epsilon })
}

/// Crafts a single perturbation that flips as many of `images` as possible.
///
/// Each epoch visits the images in a seeded shuffled order; for every image
/// still correctly classified under the current `v`, it steps `v` along the
/// sign of the cross-entropy input gradient at clip(x+v) and projects back
/// onto the L∞ ball. Stops after `max_epochs` or when an epoch improves the
/// fooling rate by less than half a point.
pub fn uap_craft<C: Classifier + ?Sized>(
    model: &C,
    images: &[Tensor],
    labels: &[usize],
    cfg: &UapConfig,
    seed: u64,
) -> Result<Perturbation, AttackError> {
    if !model.has_gradient() {
        return Err(VariantError::GradientUnavailable(model.kind_name()).into());
    }
    if !(cfg.epsilon >= 0.0 && cfg.epsilon.is_finite()) || !(cfg.step_size > 0.0) {
        return Err(AttackError::Param(format!("uap needs epsilon >= 0 and step_size > 0, got {cfg:?}")));
    }
    if images.is_empty() || images.len() != labels.len() {
        return Err(AttackError::Param("uap needs a non-empty, labelled crafting set".into()));
    }
    let shape = images[0].shape().to_vec();
    let mut v = vec![0.0f32; images[0].numel()];
    let as_tensor = |v: &[f32]| Tensor::new(shape.clone(), v.to_vec()).expect("image shape");
    if cfg.epsilon == 0.0 {
        return Ok(Perturbation { v: as_tensor(&v), epsilon: 0.0, fooling_rate: 0.0, epochs: 0 });
    }

    let eps = cfg.epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rate = 0.0;
    let mut epochs = 0;
    while epochs < cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut vt = as_tensor(&v);
        for &i in &order {
            let xv = apply_perturbation(&images[i], &vt);
            if model.label(&xv)? != labels[i] {
                continue;
            }
            let g = model.loss_gradient(&xv, labels[i])?;
            for (vj, &gj) in v.iter_mut().zip(g.data()) {
                let s = if gj > 0.0 { 1.0 } else if gj < 0.0 { -1.0 } else { 0.0 };
                *vj = (*vj + cfg.step_size * s).clamp(-eps, eps);
            }
            vt = as_tensor(&v);
        }
        epochs += 1;
        let next = fooling_rate(model, images, &vt)?;
        let gain = next - rate;
        rate = next;
        if gain < 0.005 || rate >= 1.0 {
            break;
        }
    }
    Ok(Perturbation { v: as_tensor(&v), epsilon: eps, fooling_rate: rate, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::quantize_dynamic;
    use crate::variant::ModelVariant;
    use crate::vit::{Model, ViTConfig};

    /// logits = [s, −s] with s = w·x + b.
    struct Linear {
        w: Tensor,
        b: f32,
    }

    impl Oracle for Linear {
        fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
            let s: f32 = self.w.data().iter().zip(x.data()).map(|(a, b)| a * b).sum::<f32>() + self.b;
            Ok(Tensor::new(vec![2], vec![s, -s])?)
        }
    }

    impl Classifier for Linear {
        fn loss_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor, VariantError> {
            let s = self.logits(x)?.data()[0];
            let sig = 1.0 / (1.0 + (-2.0 * s).exp());
            let ds = if label == 0 { -2.0 * (1.0 - sig) } else { 2.0 * sig };
            Ok(self.w.map(|w| w * ds))
        }
    }

    fn setup() -> (Linear, Vec<Tensor>, Vec<usize>) {
        let w = Tensor::from_fn(&[1, 4, 4], |i| if i % 2 == 0 { 1.0 } else { -0.5 });
        let model = Linear { w, b: 0.0 };
        let images: Vec<Tensor> = (0..20).map(|k| Tensor::from_fn(&[1, 4, 4], |i| ((i * 7 + k * 3) % 11) as f32 / 10.0)).collect();
        let labels = images.iter().map(|x| model.label(x).unwrap()).collect();
        (model, images, labels)
    }

    #[test]
    fn zero_budget_gives_zero_vector() {
        let (m, xs, ys) = setup();
        let p = uap_craft(&m, &xs, &ys, &UapConfig::new(0.0), 1).unwrap();
        assert_eq!(p.v.max_abs(), 0.0);
        assert_eq!(fooling_rate(&m, &xs, &p.v).unwrap(), 0.0);
    }

    #[test]
    fn projection_holds_and_rate_is_recorded() {
        let (m, xs, ys) = setup();
        for &eps in &[0.01, 0.05, 0.2, 1.0] {
            let cfg = UapConfig { epsilon: eps, max_epochs: 5, step_size: eps / 3.0 };
            let p = uap_craft(&m, &xs, &ys, &cfg, 3).unwrap();
            assert!(p.linf() <= eps, "{} > {}", p.linf(), eps);
            assert_eq!(p.fooling_rate, fooling_rate(&m, &xs, &p.v).unwrap());
        }
        let big = uap_craft(&m, &xs, &ys, &UapConfig { epsilon: 1.0, max_epochs: 10, step_size: 0.1 }, 3).unwrap();
        assert!(big.fooling_rate > 0.3, "{}", big.fooling_rate);
    }

    #[test]
    fn deterministic_given_seed() {
        let (m, xs, ys) = setup();
        let cfg = UapConfig { epsilon: 0.1, max_epochs: 4, step_size: 0.02 };
        assert_eq!(uap_craft(&m, &xs, &ys, &cfg, 9).unwrap(), uap_craft(&m, &xs, &ys, &cfg, 9).unwrap());
    }

    #[test]
    fn quantized_source_is_rejected() {
        let model = Model::new(ViTConfig::toy_small(), 2).unwrap();
        let q = ModelVariant::Quantized(quantize_dynamic(&model));
        let x = vec![Tensor::full(&ViTConfig::toy_small().image_shape(), 0.5)];
        let err = uap_craft(&q, &x, &[0], &UapConfig::new(0.03), 0).unwrap_err();
        assert!(matches!(err, AttackError::Gradient(VariantError::GradientUnavailable(_))));
        assert!(uap_craft(&q, &x, &[0], &UapConfig::new(0.0), 0).is_err());
    }

    #[test]
    fn float_model_uap_stays_in_budget() {
        let model = Model::new(ViTConfig::toy_small(), 2).unwrap();
        let shape = ViTConfig::toy_small().image_shape();
        let xs: Vec<Tensor> = (0..4).map(|k| Tensor::from_fn(&shape, |i| ((i + k * 5) % 13) as f32 / 12.0)).collect();
        let ys: Vec<usize> = xs.iter().map(|x| model.classify(x).unwrap()).collect();
        let p = uap_craft(&model, &xs, &ys, &UapConfig { epsilon: 8.0 / 255.0, max_epochs: 2, step_size: 2.0 / 255.0 }, 0).unwrap();
        assert!(p.linf() <= 8.0 / 255.0 + 1e-7);
        assert!(apply_perturbation(&xs[0], &p.v).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn random_sign_baseline_is_on_the_boundary() {
        let v = random_sign_perturbation(&[3, 4, 4], 0.03, 5);
        assert!(v.data().iter().all(|&x| x == 0.03 || x == -0.03));
        assert_eq!(v, random_sign_perturbation(&[3, 4, 4], 0.03, 5));
    }
}

//! Minibatch SGD with momentum, optionally distilling from a frozen teacher.
//!
//! Per-sample gradients run on the rayon pool; they are summed in sample
//! order afterwards, so results do not depend on thread scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::tensor::{kernels, Tape, Tensor, Var};

use super::encoder::TapeTrace;
use super::params::{bind, leaves, leaves_mut};
use super::{cross_entropy, ForwardTrace, Model, ModelError, ViTConfig};

/// A model whose trainable tensors can be recorded on a tape.
pub trait TapeModel: Sync {
    fn config(&self) -> &ViTConfig;

    /// Trainable tensors in a fixed order.
    fn trainable(&self) -> Vec<&Tensor>;

    fn trainable_mut(&mut self) -> Vec<&mut Tensor>;

    /// Records a forward pass with the trainable tensors bound as
    /// gradient-carrying leaves, returned in [`TapeModel::trainable`] order.
    fn record(&self, tape: &mut Tape, image: Var, trace: bool) -> Result<(TapeTrace, Vec<Var>), ModelError>;

    /// Records the inference graph with every parameter held constant.
    fn record_eval(&self, tape: &mut Tape, image: Var) -> Result<TapeTrace, ModelError>;

    /// Model-specific regularizer added to the objective (weight included).
    fn aux_loss(&self, _tape: &mut Tape, _trace: &TapeTrace) -> Result<Option<Var>, ModelError> {
        Ok(None)
    }

    /// Fused inference logits.
    fn eval_logits(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        super::check_image(self.config(), image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let t = self.record_eval(&mut tape, x)?;
        let trace = ForwardTrace::collect(&tape, &t, self.config().heads, false)?;
        Ok(trace.fused_logits())
    }
}

/// Gradient of cross-entropy on the fused inference logits with respect to the input.
pub fn input_gradient<M: TapeModel + ?Sized>(model: &M, image: &Tensor, label: usize) -> Result<Tensor, ModelError> {
    super::check_image(model.config(), image)?;
    let mut tape = Tape::new();
    let x = tape.param(image.clone());
    let t = model.record_eval(&mut tape, x)?;
    let logits = match t.distill_logits {
        Some(d) => {
            let s = tape.add(t.logits, d)?;
            tape.scale(s, 0.5)
        }
        None => t.logits,
    };
    let loss = cross_entropy(&mut tape, logits, label)?;
    let mut grads = tape.backward(loss)?;
    Ok(grads.take(x).expect("input requires grad"))
}

/// Task loss (cross-entropy plus any model regularizer) for one sample and its
/// gradient with respect to every trainable tensor, in [`TapeModel::trainable`] order.
pub fn loss_and_grads<M: TapeModel>(model: &M, image: &Tensor, label: usize) -> Result<(f32, Vec<Tensor>), ModelError> {
    super::check_image(model.config(), image)?;
    let obj = Objective { weights: LossWeights::TASK_ONLY, temperature: 1.0, targets: None };
    let out = sample_step(model, image, label, None, &obj)?;
    Ok((out.loss, out.grads))
}

impl TapeModel for Model {
    fn config(&self) -> &ViTConfig {
        Model::config(self)
    }

    fn trainable(&self) -> Vec<&Tensor> {
        leaves(self.params())
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        leaves_mut(self.params_mut())
    }

    fn record(&self, tape: &mut Tape, image: Var, trace: bool) -> Result<(TapeTrace, Vec<Var>), ModelError> {
        let vars = bind(tape, self.params(), true);
        let t = self.encode_bound(tape, &vars, image, super::encoder::Gate::Off, trace)?;
        Ok((t, leaves(&vars).into_iter().copied().collect()))
    }

    fn record_eval(&self, tape: &mut Tape, image: Var) -> Result<TapeTrace, ModelError> {
        let vars = bind(tape, self.params(), false);
        self.encode_bound(tape, &vars, image, super::encoder::Gate::Off, false)
    }

    fn eval_logits(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward(image, false)?.fused_logits())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub momentum: f32,
    pub schedule: Schedule,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.05, epochs: 10, batch: 32, seed: 0, momentum: 0.9, schedule: Schedule::Cosine, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f32,
    pub logit: f32,
    pub attn: f32,
    pub hidden: f32,
}

impl LossWeights {
    pub const TASK_ONLY: LossWeights = LossWeights { ce: 1.0, logit: 0.0, attn: 0.0, hidden: 0.0 };
}

/// Teacher plus loss mix for distillation.
#[derive(Clone, Copy, Debug)]
pub struct DistillSpec<'a> {
    pub teacher: &'a Model,
    pub weights: LossWeights,
    pub temperature: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f32,
    pub accuracy: f32,
    pub val_accuracy: Option<f32>,
    pub ce: f32,
    pub logit: f32,
    pub attn: f32,
    pub hidden: f32,
    pub aux: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Cached teacher outputs for one sample.
struct Target {
    log_probs: Vec<f32>,
    probs: Vec<f32>,
    attentions: Vec<Tensor>,
    hiddens: Vec<Tensor>,
}

struct Objective<'a> {
    weights: LossWeights,
    temperature: f32,
    targets: Option<&'a [Target]>,
}

#[derive(Default)]
struct SampleOut {
    grads: Vec<Tensor>,
    loss: f32,
    parts: [f32; 5],
    correct: bool,
}

/// Plain supervised training on the train split.
pub fn train<M: TapeModel>(model: &mut M, data: &Dataset, cfg: &TrainConfig) -> Result<History, ModelError> {
    let obj = Objective { weights: LossWeights::TASK_ONLY, temperature: 1.0, targets: None };
    fit(model, data, cfg, &obj)
}

/// Trains `student` against `spec.teacher`:
/// `α_ce·CE + α_logit·T²·KL(teacher ∥ student) + α_attn·MSE(attn) + α_hidden·MSE(hidden)`.
///
/// When the student carries a distillation token, labels supervise the CLS
/// head and the teacher supervises the distillation head.
pub fn distill<M: TapeModel>(
    spec: &DistillSpec,
    student: &mut M,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<History, ModelError> {
    let w = spec.weights;
    if [w.ce, w.logit, w.attn, w.hidden].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(ModelError::IncompatibleDistill("loss weights must be finite and non-negative".into()));
    }
    if !(spec.temperature > 0.0) {
        return Err(ModelError::IncompatibleDistill("temperature must be positive".into()));
    }
    check_compatible(spec, student.config())?;
    let need_trace = w.attn > 0.0 || w.hidden > 0.0;
    let idx = train_indices(data)?;
    let targets = idx
        .par_iter()
        .map(|&i| teacher_target(spec.teacher, data.image(i), spec.temperature, need_trace))
        .collect::<Result<Vec<_>, _>>()?;
    let obj = Objective { weights: w, temperature: spec.temperature, targets: Some(&targets) };
    fit(student, data, cfg, &obj)
}

fn check_compatible(spec: &DistillSpec, student: &ViTConfig) -> Result<(), ModelError> {
    let t = spec.teacher.config();
    let w = spec.weights;
    if t.num_classes != student.num_classes {
        return Err(ModelError::IncompatibleDistill(format!(
            "teacher has {} classes, student {}",
            t.num_classes, student.num_classes
        )));
    }
    if (w.attn > 0.0 || w.hidden > 0.0)
        && (t.depth != student.depth || t.num_tokens() != student.num_tokens())
    {
        return Err(ModelError::IncompatibleDistill(format!(
            "attention/hidden distillation needs matching depth and token count (teacher {}×{}, student {}×{})",
            t.depth,
            t.num_tokens(),
            student.depth,
            student.num_tokens()
        )));
    }
    if w.attn > 0.0 && t.heads != student.heads {
        return Err(ModelError::IncompatibleDistill("attention distillation needs matching head count".into()));
    }
    if w.hidden > 0.0 && t.embed_dim != student.embed_dim {
        return Err(ModelError::IncompatibleDistill(format!(
            "hidden-state distillation needs matching width (teacher {}, student {}); no projection is configured",
            t.embed_dim, student.embed_dim
        )));
    }
    Ok(())
}

fn teacher_target(teacher: &Model, image: &Tensor, temperature: f32, trace: bool) -> Result<Target, ModelError> {
    let out = teacher.forward(image, trace)?;
    let mut log_probs: Vec<f32> = out.fused_logits().data().iter().map(|v| v / temperature).collect();
    kernels::log_softmax_row(&mut log_probs);
    let probs = log_probs.iter().map(|v| v.exp()).collect();
    let attentions = out
        .attentions
        .iter()
        .map(|a| {
            let (h, n) = (a.shape()[0], a.shape()[1]);
            a.reshape(&[h * n, a.shape()[2]])
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Target { log_probs, probs, attentions, hiddens: out.hiddens })
}

fn train_indices(data: &Dataset) -> Result<Vec<usize>, ModelError> {
    let idx = data.indices(Split::Train);
    if idx.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    for &i in &idx {
        if data.split(i) == Split::Attack {
            return Err(ModelError::AttackSplitInTraining(i));
        }
    }
    Ok(idx)
}

fn mse(tape: &mut Tape, a: Var, target: &Tensor) -> crate::tensor::Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(a, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

fn mean_over(tape: &mut Tape, terms: &[Var]) -> crate::tensor::Result<Var> {
    let s = match terms {
        [] => unreachable!("at least one block"),
        [only] => *only,
        _ => {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    Ok(tape.scale(s, 1.0 / terms.len() as f32))
}

fn sample_step<M: TapeModel>(
    model: &M,
    image: &Tensor,
    label: usize,
    target: Option<&Target>,
    obj: &Objective,
) -> Result<SampleOut, ModelError> {
    let w = obj.weights;
    let kl_on = target.is_some() && w.logit > 0.0;
    let attn_on = target.is_some() && w.attn > 0.0;
    let hidden_on = target.is_some() && w.hidden > 0.0;
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let (tr, params) = model.record(&mut tape, x, attn_on)?;

    let fused = match tr.distill_logits {
        Some(d) => {
            let s = tape.add(tr.logits, d)?;
            tape.scale(s, 0.5)
        }
        None => tr.logits,
    };
    let correct = crate::tensor::argmax(tape.value(fused).data()) == label;
    let mut terms: Vec<Var> = Vec::new();
    let mut parts = [0.0f32; 5];

    if w.ce > 0.0 {
        let head = if kl_on && tr.distill_logits.is_some() { tr.logits } else { fused };
        let ce = cross_entropy(&mut tape, head, label)?;
        parts[0] = tape.value(ce).data()[0];
        terms.push(if w.ce == 1.0 { ce } else { tape.scale(ce, w.ce) });
    }
    if let Some(t) = target {
        if kl_on {
            let student = tr.distill_logits.unwrap_or(tr.logits);
            let soft = tape.scale(student, 1.0 / obj.temperature);
            let ls = tape.log_softmax(soft);
            let c = t.probs.len();
            let lt = tape.constant(Tensor::new(vec![1, c], t.log_probs.clone())?);
            let p = tape.constant(Tensor::new(vec![1, c], t.probs.clone())?);
            let diff = tape.sub(lt, ls)?;
            let prod = tape.mul(p, diff)?;
            let kl = tape.sum(prod);
            // rounding can leave a tiny negative value; the divergence itself is ≥ 0
            parts[1] = tape.value(kl).data()[0].max(0.0);
            terms.push(tape.scale(kl, w.logit * obj.temperature * obj.temperature));
        }
        if attn_on {
            let per_block = tr
                .attentions
                .iter()
                .zip(&t.attentions)
                .map(|(&a, ta)| mse(&mut tape, a, ta))
                .collect::<Result<Vec<_>, _>>()?;
            let m = mean_over(&mut tape, &per_block)?;
            parts[2] = tape.value(m).data()[0];
            terms.push(tape.scale(m, w.attn));
        }
        if hidden_on {
            let per_block = tr
                .hiddens
                .iter()
                .zip(&t.hiddens)
                .map(|(&h, th)| mse(&mut tape, h, th))
                .collect::<Result<Vec<_>, _>>()?;
            let m = mean_over(&mut tape, &per_block)?;
            parts[3] = tape.value(m).data()[0];
            terms.push(tape.scale(m, w.hidden));
        }
    }
    if let Some(aux) = model.aux_loss(&mut tape, &tr)? {
        parts[4] = tape.value(aux).data()[0];
        terms.push(aux);
    }
    if terms.is_empty() {
        return Err(ModelError::InvalidConfig("every loss weight is zero".into()));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(crate::tensor::TensorError::NonFinite("loss").into());
    }
    let mut grads = tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|&p| grads.take(p).expect("trainable leaf has a gradient"))
        .collect();
    Ok(SampleOut { grads, loss: value, parts, correct })
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f32 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let t = step as f32 / total.max(1) as f32;
            cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
        }
    }
}

fn fit<M: TapeModel>(model: &mut M, data: &Dataset, cfg: &TrainConfig, obj: &Objective) -> Result<History, ModelError> {
    if cfg.batch == 0 {
        return Err(ModelError::InvalidConfig("batch size must be positive".into()));
    }
    let idx = train_indices(data)?;
    let classes = model.config().num_classes;
    for &i in &idx {
        if data.label(i) >= classes {
            return Err(ModelError::BadLabel { label: data.label(i), classes });
        }
    }
    let val = data.indices(Split::Val);
    // position of each train sample within the cached teacher targets
    let mut order: Vec<usize> = (0..idx.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f32>> = model.trainable().iter().map(|t| vec![0.0; t.numel()]).collect();
    let steps_per_epoch = idx.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut stats = EpochStats { epoch, ..Default::default() };
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let frozen: &M = model;
            let outs: Vec<Result<SampleOut, ModelError>> = chunk
                .par_iter()
                .map(|&k| {
                    let i = idx[k];
                    let target = obj.targets.map(|t| &t[k]);
                    sample_step(frozen, data.image(i), data.label(i), target, obj)
                })
                .collect();
            let mut sum: Option<Vec<Vec<f32>>> = None;
            for out in outs {
                let out = match out {
                    Ok(o) => o,
                    Err(ModelError::Tensor(crate::tensor::TensorError::NonFinite(_))) => {
                        return Err(ModelError::NonFiniteLoss { epoch, step })
                    }
                    Err(e) => return Err(e),
                };
                stats.loss += out.loss;
                stats.ce += out.parts[0];
                stats.logit += out.parts[1];
                stats.attn += out.parts[2];
                stats.hidden += out.parts[3];
                stats.aux += out.parts[4];
                correct += usize::from(out.correct);
                match &mut sum {
                    None => sum = Some(out.grads.into_iter().map(Tensor::into_data).collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&out.grads) {
                            for (x, y) in a.iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / chunk.len() as f32;
            let mut norm_sq = 0.0f64;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= inv;
                    norm_sq += f64::from(*v) * f64::from(*v);
                }
            }
            let clip = match cfg.clip_norm {
                Some(c) if norm_sq.sqrt() > f64::from(c) => (f64::from(c) / norm_sq.sqrt()) as f32,
                _ => 1.0,
            };
            let lr = lr_at(cfg, epoch * steps_per_epoch + step, total_steps);
            for ((param, vel), g) in model.trainable_mut().into_iter().zip(&mut velocity).zip(&grads) {
                let w = param.data_mut();
                for ((w, v), &g) in w.iter_mut().zip(vel.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v + clip * g;
                    *w -= lr * *v;
                }
            }
        }
        let n = idx.len() as f32;
        stats.loss /= n;
        stats.ce /= n;
        stats.logit /= n;
        stats.attn /= n;
        stats.hidden /= n;
        stats.aux /= n;
        stats.accuracy = correct as f32 / n;
        if !val.is_empty() {
            let frozen: &M = model;
            let hits = val
                .par_iter()
                .map(|&i| frozen.eval_logits(data.image(i)).map(|l| crate::tensor::argmax(l.data()) == data.label(i)))
                .collect::<Result<Vec<_>, _>>()?;
            stats.val_accuracy = Some(hits.iter().filter(|&&h| h).count() as f32 / val.len() as f32);
        }
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.3} val {:?}",
            stats.loss,
            stats.accuracy,
            stats.val_accuracy
        );
        history.epochs.push(stats);
    }
    Ok(history)
}

/// Accuracy of fused-logit argmax over one split.
pub fn accuracy<M: TapeModel>(model: &M, data: &Dataset, split: Split) -> Result<f32, ModelError> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Ok(0.0);
    }
    let hits = idx
        .par_iter()
        .map(|&i| model.eval_logits(data.image(i)).map(|l| crate::tensor::argmax(l.data()) == data.label(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f32 / idx.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, ImageSpec};

    fn tiny_cfg() -> ViTConfig {
        ViTConfig { image_size: 8, patch_size: 4, channels: 1, embed_dim: 16, depth: 2, heads: 2, num_classes: 3, ..ViTConfig::toy_small() }
    }

    fn tiny_data() -> Dataset {
        synth_dataset(5, 10, 3, &ImageSpec { size: 8, channels: 1, noise: 0.05 }).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig { lr: 0.05, epochs, batch: 8, seed: 11, ..TrainConfig::default() }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut m = Model::new(tiny_cfg(), 1).unwrap();
        let before = m.clone();
        let h = train(&mut m, &tiny_data(), &TrainConfig { lr: 0.0, epochs: 1, ..quick(1) }).unwrap();
        assert_eq!(m, before);
        assert!(h.epochs[0].loss.is_finite());
    }

    #[test]
    fn same_seed_same_weights() {
        let run = || {
            let mut m = Model::new(tiny_cfg(), 2).unwrap();
            let h = train(&mut m, &tiny_data(), &quick(2)).unwrap();
            (m, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn single_sample_overfits() {
        let d = tiny_data();
        let one = Dataset::new(vec![d.image(0).clone()], vec![d.label(0)], vec![Split::Train], 3).unwrap();
        let mut m = Model::new(tiny_cfg(), 3).unwrap();
        let cfg = TrainConfig { lr: 0.05, epochs: 500, batch: 1, schedule: Schedule::Constant, clip_norm: None, ..quick(1) };
        let h = train(&mut m, &one, &cfg).unwrap();
        let last = h.last().unwrap().loss;
        assert!(last < 0.01, "loss {last}");
    }

    #[test]
    fn empty_or_attack_only_dataset_is_rejected() {
        let d = tiny_data().take(Split::Attack, 3);
        let mut m = Model::new(tiny_cfg(), 1).unwrap();
        assert!(matches!(train(&mut m, &d, &quick(1)), Err(ModelError::EmptyDataset)));
    }

    #[test]
    fn non_finite_weights_abort_with_location() {
        let mut m = Model::new(tiny_cfg(), 1).unwrap();
        m.params_mut().head.head.bias.data_mut()[0] = f32::NAN;
        let err = train(&mut m, &tiny_data(), &quick(1)).unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteLoss { epoch: 0, step: 0 }), "{err}");
    }

    #[test]
    fn self_distillation_losses_are_zero() {
        let teacher = Model::new(tiny_cfg(), 4).unwrap();
        let mut student = teacher.clone();
        let spec = DistillSpec {
            teacher: &teacher,
            weights: LossWeights { ce: 0.0, logit: 1.0, attn: 1.0, hidden: 1.0 },
            temperature: 2.0,
        };
        let h = distill(&spec, &mut student, &tiny_data(), &TrainConfig { lr: 0.0, ..quick(1) }).unwrap();
        let e = &h.epochs[0];
        assert_eq!((e.logit, e.attn, e.hidden), (0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_distill_weights_match_plain_training() {
        let teacher = Model::new(tiny_cfg(), 5).unwrap();
        let mut a = Model::new(tiny_cfg(), 6).unwrap();
        let mut b = a.clone();
        let ha = train(&mut a, &tiny_data(), &quick(2)).unwrap();
        let spec = DistillSpec { teacher: &teacher, weights: LossWeights::TASK_ONLY, temperature: 3.0 };
        let hb = distill(&spec, &mut b, &tiny_data(), &quick(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn mismatched_width_without_projection_errors() {
        let teacher = Model::new(tiny_cfg(), 5).unwrap();
        let mut student = Model::new(ViTConfig { embed_dim: 8, ..tiny_cfg() }, 6).unwrap();
        let spec = DistillSpec { teacher: &teacher, weights: LossWeights { ce: 1.0, logit: 0.0, attn: 0.0, hidden: 1.0 }, temperature: 1.0 };
        assert!(matches!(
            distill(&spec, &mut student, &tiny_data(), &quick(1)),
            Err(ModelError::IncompatibleDistill(_))
        ));
        // logit-only distillation across widths is fine
        let spec = DistillSpec { weights: LossWeights { ce: 1.0, logit: 1.0, attn: 0.0, hidden: 0.0 }, ..spec };
        assert!(distill(&spec, &mut student, &tiny_data(), &quick(1)).is_ok());
    }
}

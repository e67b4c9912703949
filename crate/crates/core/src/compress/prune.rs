//! Dynamic token pruning.
//!
//! Before each stage layer a scorer rates every live patch token from
//! `[token ∥ mean of live tokens]`. At inference the `ceil(ρ^s·N)` best are
//! kept (CLS and distillation tokens always survive) and the rest are
//! dropped. During training the hard choice is replaced by a cumulative
//! sigmoid keep-mask that reweights attention columns, so pruned tokens stop
//! being attended to while gradients still reach the scorer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::tensor::{kernels, Tape, Tensor, Var};
use crate::vit::checkpoint::{model_from_checkpoint, Checkpoint, CheckpointError, VariantStanza};
use crate::vit::flops::{keep_count, KeepSchedule};
use crate::vit::params::{bind, leaves, leaves_mut, linear_init, Scorer};
use crate::vit::train::{distill, DistillSpec, History, LossWeights, TapeModel, TrainConfig};
use crate::vit::{check_image, ForwardTrace, Model, ModelError, TapeTrace, ViTConfig};

use crate::vit::encoder::{BlockView, Gate};

/// Weight of the keep-ratio regularizer during scorer training.
pub const DEFAULT_RATIO_WEIGHT: f32 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicModel {
    base: Model,
    scorers: Vec<Scorer<Tensor>>,
    rho: f64,
    stages: Vec<usize>,
    /// Fine-tune the backbone alongside the scorers.
    pub train_base: bool,
    pub ratio_weight: f32,
}

fn validate(config: &ViTConfig, rho: f64, stages: &[usize]) -> Result<(), ModelError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(ModelError::InvalidConfig(format!("keep probability {rho} outside (0, 1]")));
    }
    if stages.is_empty() {
        return Err(ModelError::InvalidConfig("at least one pruning stage is required".into()));
    }
    if let Some(&bad) = stages.iter().find(|&&s| s >= config.depth) {
        return Err(ModelError::InvalidConfig(format!("stage layer {bad} out of range for depth {}", config.depth)));
    }
    if stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::InvalidConfig(format!("stage layers {stages:?} are not strictly increasing")));
    }
    Ok(())
}

/// Wraps `model` with freshly initialized scorers.
///
/// The scorer output bias starts at `logit(ρ)` so the soft keep-mask begins
/// near the target ratio.
pub fn prunify(model: &Model, rho: f64, stages: &[usize], seed: u64) -> Result<DynamicModel, ModelError> {
    let cfg = model.config();
    validate(cfg, rho, stages)?;
    let d = cfg.embed_dim;
    let hidden = (d / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rho.min(0.99) as f32;
    let bias = (p / (1.0 - p)).ln();
    let scorers = stages
        .iter()
        .map(|_| {
            let fc1 = linear_init(&mut rng, 2 * d, hidden);
            let mut fc2 = linear_init(&mut rng, hidden, 1);
            fc2.bias = Tensor::full(&[1], bias);
            Scorer { fc1, fc2 }
        })
        .collect();
    Ok(DynamicModel {
        base: model.clone(),
        scorers,
        rho,
        stages: stages.to_vec(),
        train_base: false,
        ratio_weight: DEFAULT_RATIO_WEIGHT,
    })
}

impl DynamicModel {
    pub fn base(&self) -> &Model {
        &self.base
    }

    pub fn scorers(&self) -> &[Scorer<Tensor>] {
        &self.scorers
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    pub fn config(&self) -> &ViTConfig {
        self.base.config()
    }

    pub fn schedule(&self) -> KeepSchedule {
        KeepSchedule::uniform(self.rho, &self.stages)
    }

    /// Live patch tokens after each stage at inference.
    pub fn keep_counts(&self) -> Vec<usize> {
        self.schedule().live_counts(self.config().num_patches())
    }

    fn encode(&self, tape: &mut Tape, image: Var, params: bool, hard: bool, trace: bool) -> Result<(TapeTrace, Vec<Var>), ModelError> {
        let base = bind(tape, self.base.params(), params && self.train_base);
        let scorers = bind(tape, &self.scorers, params);
        let keep = self.keep_counts();
        let gate = if hard {
            Gate::Hard { scorers: &scorers, stages: &self.stages, keep: &keep }
        } else {
            Gate::Soft { scorers: &scorers, stages: &self.stages }
        };
        let views: Vec<BlockView> = base
            .blocks
            .iter()
            .map(|b| BlockView { norms: &b.norms, weights: &b.weights, affine: None })
            .collect();
        let t = crate::vit::encoder::encode(tape, self.config(), &base.stem, &views, &base.head, image, gate, trace)?;
        let mut vars: Vec<Var> = Vec::new();
        if params {
            if self.train_base {
                vars.extend(leaves(&base).into_iter().copied());
            }
            vars.extend(leaves(&scorers).into_iter().copied());
        }
        Ok((t, vars))
    }

    /// Hard-pruned inference. The trace's attentions and hiddens shrink with the live token count.
    pub fn forward(&self, image: &Tensor, want_trace: bool) -> Result<ForwardTrace, ModelError> {
        check_image(self.config(), image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let (t, _) = self.encode(&mut tape, x, false, true, want_trace)?;
        ForwardTrace::collect(&tape, &t, self.config().heads, want_trace)
    }

    /// Original patch indices alive after each stage.
    pub fn kept_tokens(&self, image: &Tensor) -> Result<Vec<Vec<usize>>, ModelError> {
        check_image(self.config(), image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        Ok(self.encode(&mut tape, x, false, true, false)?.0.kept)
    }

    /// Scorer logits for the patch rows of `tokens[n×D]` at stage `stage`.
    pub fn score_tokens(&self, stage: usize, tokens: &Tensor) -> Result<Vec<f32>, ModelError> {
        let mut tape = Tape::new();
        let s = bind(&mut tape, &self.scorers[stage], false);
        let x = tape.constant(tokens.clone());
        let ctx = tape.mean_rows(x);
        let logits = crate::vit::encoder::score(&mut tape, x, ctx, &s)?;
        Ok(tape.value(logits).data().to_vec())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = crate::vit::checkpoint::float_checkpoint(&self.base);
        ck.variant = VariantStanza::Pruned { rho: self.rho, stages: self.stages.clone() };
        ck.push_tree("scorers", &self.scorers);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let VariantStanza::Pruned { rho, stages } = &ck.variant else {
            return Err(CheckpointError::Mismatch(format!("expected a pruned checkpoint, found {:?}", ck.variant)));
        };
        let mut cursor = 0;
        let base = model_from_checkpoint(ck, &mut cursor)?;
        let mut m = prunify(&base, *rho, stages, 0).map_err(|e| CheckpointError::Header(e.to_string()))?;
        ck.fill_tree(&mut cursor, "scorers", &mut m.scorers)?;
        if cursor != ck.tensors.len() {
            return Err(CheckpointError::Mismatch(format!("{} unexpected trailing tensors", ck.tensors.len() - cursor)));
        }
        Ok(m)
    }
}

impl TapeModel for DynamicModel {
    fn config(&self) -> &ViTConfig {
        self.base.config()
    }

    fn trainable(&self) -> Vec<&Tensor> {
        let mut out = if self.train_base { leaves(self.base.params()) } else { Vec::new() };
        out.extend(leaves(&self.scorers));
        out
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = if self.train_base { leaves_mut(self.base.params_mut()) } else { Vec::new() };
        out.extend(leaves_mut(&mut self.scorers));
        out
    }

    fn record(&self, tape: &mut Tape, image: Var, trace: bool) -> Result<(TapeTrace, Vec<Var>), ModelError> {
        self.encode(tape, image, true, false, trace)
    }

    fn record_eval(&self, tape: &mut Tape, image: Var) -> Result<TapeTrace, ModelError> {
        Ok(self.encode(tape, image, false, true, false)?.0)
    }

    /// `w·Σ_s (mean(M_s) − ρ^s)²` over the soft masks.
    fn aux_loss(&self, tape: &mut Tape, trace: &TapeTrace) -> Result<Option<Var>, ModelError> {
        if trace.stage_masks.is_empty() || self.ratio_weight == 0.0 {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for (s, &mask) in trace.stage_masks.iter().enumerate() {
            let target = self.rho.powi(s as i32 + 1) as f32;
            let mean = tape.mean(mask);
            let t = tape.constant(Tensor::scalar(target));
            let d = tape.sub(mean, t)?;
            let sq = tape.mul(d, d)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, sq)?,
                None => sq,
            });
        }
        Ok(Some(tape.scale(total.expect("non-empty"), self.ratio_weight)))
    }
}

/// Trains scorers for `base` with task loss plus logit distillation from the
/// unpruned base; the base stays frozen unless `train_base` is set.
#[allow(clippy::too_many_arguments)]
pub fn train_dynamic(
    base: &Model,
    data: &Dataset,
    rho: f64,
    stages: &[usize],
    cfg: &TrainConfig,
    temperature: f32,
    train_base: bool,
) -> Result<(DynamicModel, History), ModelError> {
    let mut m = prunify(base, rho, stages, cfg.seed)?;
    m.train_base = train_base;
    let spec = DistillSpec { teacher: base, weights: LossWeights { ce: 1.0, logit: 1.0, attn: 0.0, hidden: 0.0 }, temperature };
    let history = distill(&spec, &mut m, data, cfg)?;
    Ok((m, history))
}

/// Standalone masked attention `softmax(QKᵀ/√d + ln m)·V` for one head;
/// a zero mask entry removes that key column entirely.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[f32]) -> Result<(Tensor, Tensor), ModelError> {
    let (n, d) = q.dims2();
    let (nk, dk) = k.dims2();
    if d != dk || nk != mask.len() || v.dims2().0 != nk {
        return Err(crate::tensor::TensorError::ShapeMismatch { op: "masked_attention", lhs: q.shape().to_vec(), rhs: k.shape().to_vec() }.into());
    }
    let mut scores = vec![0.0f32; n * nk];
    kernels::matmul_nt_acc(q.data(), k.data(), &mut scores, n, d, nk);
    let scale = 1.0 / (d as f32).sqrt();
    let mut attn = vec![0.0f32; n * nk];
    for (row, out) in scores.chunks(nk).zip(attn.chunks_mut(nk)) {
        let scaled: Vec<f32> = row.iter().map(|s| s * scale).collect();
        kernels::masked_softmax_row(&scaled, mask, out);
    }
    let attn = Tensor::new(vec![n, nk], attn)?;
    let out = attn.matmul(v)?;
    Ok((out, attn))
}

/// Final live fraction after all stages of a uniform schedule.
pub fn final_keep_fraction(rho: f64, stages: usize, num_patches: usize) -> f64 {
    keep_count(rho.powi(stages as i32), num_patches) as f64 / num_patches as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::top_k_indices;
    use rand::Rng;

    fn image(cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&cfg.image_shape(), |_| rng.gen())
    }

    #[test]
    fn rho_one_is_the_base_model() {
        let cfg = ViTConfig::toy_small();
        let base = Model::new(cfg.clone(), 1).unwrap();
        let dm = prunify(&base, 1.0, &[1, 2, 3], 2).unwrap();
        for i in 0..100 {
            let img = image(&cfg, i);
            let a = base.forward(&img, false).unwrap().logits;
            let b = dm.forward(&img, false).unwrap().logits;
            assert!(a.max_abs_diff(&b) <= 1e-5);
        }
    }

    #[test]
    fn live_counts_follow_schedule() {
        let cfg = ViTConfig::toy_small();
        let base = Model::new(cfg.clone(), 1).unwrap();
        for (rho, want) in [(0.7, vec![12, 8, 6]), (0.6, vec![10, 6, 4]), (0.5, vec![8, 4, 2])] {
            let dm = prunify(&base, rho, &[1, 2, 3], 3).unwrap();
            let kept = dm.kept_tokens(&image(&cfg, 4)).unwrap();
            assert_eq!(kept.iter().map(Vec::len).collect::<Vec<_>>(), want);
            // each stage keeps a subset of the previous one, in original order
            for w in kept.windows(2) {
                assert!(w[1].iter().all(|i| w[0].contains(i)));
                assert!(w[1].windows(2).all(|p| p[0] < p[1]));
            }
            let t = dm.forward(&image(&cfg, 4), true).unwrap();
            assert_eq!(t.hiddens.last().unwrap().shape()[0], want[2] + 1);
        }
    }

    #[test]
    fn seventy_percent_over_three_stages_prunes_about_two_thirds() {
        let f = 0.7f64.powi(3);
        assert!((f - 0.343).abs() < 1e-9);
        assert!((final_keep_fraction(0.7, 3, 196) - 0.343).abs() < 0.01);
    }

    #[test]
    fn invalid_schedules_rejected() {
        let base = Model::new(ViTConfig::toy_small(), 1).unwrap();
        assert!(prunify(&base, 0.0, &[1], 0).is_err());
        assert!(prunify(&base, 1.5, &[1], 0).is_err());
        assert!(prunify(&base, 0.7, &[4], 0).is_err());
        assert!(prunify(&base, 0.7, &[2, 1], 0).is_err());
    }

    #[test]
    fn masked_token_receives_no_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = |r, c| Tensor::from_fn(&[r, c], |_| rng.gen_range(-2.0..2.0));
        let (q, k, v) = (t(5, 4), t(5, 4), t(5, 3));
        let mask = [1.0, 1.0, 0.0, 1.0, 1.0];
        let (_, attn) = masked_attention(&q, &k, &v, &mask).unwrap();
        for row in attn.data().chunks(5) {
            assert!(row[2] < 1e-7);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scorer_is_permutation_equivariant() {
        let cfg = ViTConfig::toy_small();
        let dm = prunify(&Model::new(cfg.clone(), 1).unwrap(), 0.7, &[1, 2, 3], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens = Tensor::from_fn(&[6, 64], |_| rng.gen_range(-1.0..1.0));
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted = Tensor::from_fn(&[6, 64], |i| tokens.data()[perm[i / 64] * 64 + i % 64]);
        let a = dm.score_tokens(0, &tokens).unwrap();
        let b = dm.score_tokens(0, &permuted).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((b[i] - a[p]).abs() < 1e-5);
        }
    }

    #[test]
    fn top_k_keeps_exactly_k_best() {
        let scores = [0.3, 0.9, 0.1, 0.9, 0.5, 0.2];
        let kept = top_k_indices(&scores, 3);
        assert_eq!(kept, vec![1, 3, 4]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dm = prunify(&Model::new(ViTConfig::toy_small(), 1).unwrap(), 0.6, &[1, 2, 3], 7).unwrap();
        let bytes = dm.checkpoint().to_bytes();
        let back = DynamicModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, dm);
        assert_eq!(back.checkpoint().to_bytes(), bytes);
    }

    #[test]
    fn scorer_training_is_deterministic_and_finite() {
        use crate::data::{synth_dataset, ImageSpec};
        let cfg = ViTConfig { image_size: 16, patch_size: 4, channels: 1, embed_dim: 16, depth: 2, heads: 2, num_classes: 3, ..ViTConfig::toy_small() };
        let data = synth_dataset(1, 6, 3, &ImageSpec { size: 16, channels: 1, noise: 0.1 }).unwrap();
        let base = Model::new(cfg, 2).unwrap();
        let tc = TrainConfig { epochs: 2, batch: 4, seed: 3, ..TrainConfig::default() };
        let (a, ha) = train_dynamic(&base, &data, 0.7, &[1], &tc, 1.0, false).unwrap();
        let (b, hb) = train_dynamic(&base, &data, 0.7, &[1], &tc, 1.0, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(ha.epochs.iter().all(|e| e.loss.is_finite() && e.aux >= 0.0));
        assert_eq!(a.base(), &base);
    }
}

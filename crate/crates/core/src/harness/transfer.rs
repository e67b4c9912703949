//! Attack success rates and the two-way transfer protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attacks::{apply_perturbation, uap_craft, AttackConfig, AttackKind, AttackOutcome, AttackParam, Oracle};
use crate::tensor::Tensor;
use crate::variant::ModelVariant;

/// successes / eligible, with the degenerate 0/0 case flagged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Asr {
    pub value: f64,
    pub successes: usize,
    pub eligible: usize,
    /// No eligible inputs; `value` is reported as 0.
    pub degenerate: bool,
}

pub fn asr_counts(success: &[bool], eligible: &[bool]) -> Asr {
    assert_eq!(success.len(), eligible.len(), "outcomes and eligibility must align");
    let n = eligible.iter().filter(|&&e| e).count();
    let s = success.iter().zip(eligible).filter(|(&s, &e)| s && e).count();
    if n == 0 {
        log::warn!("ASR over zero eligible inputs reported as 0");
        return Asr { value: 0.0, successes: 0, eligible: 0, degenerate: true };
    }
    Asr { value: s as f64 / n as f64, successes: s, eligible: n, degenerate: false }
}

/// ASR of raw attack outcomes; `eligible[i]` marks inputs the model got right before the attack.
pub fn asr(outcomes: &[AttackOutcome], eligible: &[bool]) -> Asr {
    let s: Vec<bool> = outcomes.iter().map(|o| o.success).collect();
    asr_counts(&s, eligible)
}

/// Seed of the RNG stream owned by input `index`.
pub fn input_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Adversarial examples generated once against a source model.
#[derive(Clone, Debug)]
pub struct SourceAttack {
    pub source: String,
    pub attack: AttackConfig,
    pub outcomes: Vec<AttackOutcome>,
    /// Fooling rate of the crafted vector on the crafting set (UAP only).
    pub uap_fooling_rate: Option<f32>,
}

/// Runs `attack` against `source` on every image. Black-box attacks run per
/// input in parallel, each with its own seed stream; UAP crafts one vector on
/// the whole set and adds it to every image.
pub fn attack_source(
    source: &ModelVariant,
    source_id: &str,
    attack: &AttackConfig,
    images: &[Tensor],
    labels: &[usize],
) -> Result<SourceAttack, HarnessError> {
    let (outcomes, rate) = match &attack.kind {
        AttackKind::Uap(cfg) => {
            let p = uap_craft(source, images, labels, cfg, attack.seed)?;
            let outcomes = images
                .par_iter()
                .zip(labels)
                .map(|(x, &y)| {
                    let x_adv = apply_perturbation(x, &p.v);
                    let success = Oracle::label(source, &x_adv)? != y;
                    Ok(AttackOutcome { x_adv, success, queries: 1, param: AttackParam::Universal { epsilon: p.epsilon } })
                })
                .collect::<Result<Vec<_>, HarnessError>>()?;
            (outcomes, Some(p.fooling_rate))
        }
        kind => {
            let outcomes = images
                .par_iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (x, &y))| Ok(kind.run_black_box(source, x, y, input_seed(attack.seed, i))?))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            (outcomes, None)
        }
    };
    Ok(SourceAttack { source: source_id.to_string(), attack: attack.clone(), outcomes, uap_fooling_rate: rate })
}

/// One input's journey through a transfer cell; enough to recompute both ASRs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub index: usize,
    pub label: usize,
    pub source_clean: usize,
    pub source_adv: usize,
    pub target_clean: usize,
    pub target_adv: usize,
    pub queries: usize,
    pub param: AttackParam,
}

impl InputRecord {
    pub fn source_eligible(&self) -> bool {
        self.source_clean == self.label
    }
    pub fn target_eligible(&self) -> bool {
        self.target_clean == self.label
    }
    pub fn source_success(&self) -> bool {
        self.source_adv != self.label
    }
    pub fn target_success(&self) -> bool {
        self.target_adv != self.label
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    pub attack: String,
    pub asr_on_source: f64,
    pub asr_on_target: f64,
    pub n_attacked: usize,
    pub n_eligible_source: usize,
    /// Inputs the target classified correctly before the attack.
    pub n_eligible: usize,
    pub successes_source: usize,
    pub successes_target: usize,
}

impl TransferCell {
    /// Recomputes the cell from its per-input log.
    pub fn from_records(source: &str, target: &str, attack: &str, records: &[InputRecord]) -> Self {
        let s_ok: Vec<bool> = records.iter().map(InputRecord::source_eligible).collect();
        let t_ok: Vec<bool> = records.iter().map(InputRecord::target_eligible).collect();
        let s = asr_counts(&records.iter().map(InputRecord::source_success).collect::<Vec<_>>(), &s_ok);
        let t = asr_counts(&records.iter().map(InputRecord::target_success).collect::<Vec<_>>(), &t_ok);
        TransferCell {
            source: source.to_string(),
            target: target.to_string(),
            attack: attack.to_string(),
            asr_on_source: s.value,
            asr_on_target: t.value,
            n_attacked: records.len(),
            n_eligible_source: s.eligible,
            n_eligible: t.eligible,
            successes_source: s.successes,
            successes_target: t.successes,
        }
    }
}

/// Replays the source's adversarial tensors, unchanged, on `target`. Every
/// source success on an eligible input is re-verified by a fresh query.
pub fn evaluate_transfer(
    generated: &SourceAttack,
    source: &ModelVariant,
    target: &ModelVariant,
    target_id: &str,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(TransferCell, Vec<InputRecord>), HarnessError> {
    if source.config().image_shape() != target.config().image_shape()
        || source.config().num_classes != target.config().num_classes
    {
        return Err(HarnessError::Config(format!("{} and {target_id} disagree on input or class spec", generated.source)));
    }
    let records = images
        .par_iter()
        .zip(labels)
        .zip(&generated.outcomes)
        .enumerate()
        .map(|(index, ((x, &label), out))| {
            let source_clean = Oracle::label(source, x)?;
            let source_adv = Oracle::label(source, &out.x_adv)?;
            if source_clean == label && out.success != (source_adv != label) {
                return Err(HarnessError::Verification { model: generated.source.clone(), index });
            }
            Ok(InputRecord {
                index,
                label,
                source_clean,
                source_adv,
                target_clean: Oracle::label(target, x)?,
                target_adv: Oracle::label(target, &out.x_adv)?,
                queries: out.queries,
                param: out.param.clone(),
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let cell = TransferCell::from_records(&generated.source, target_id, generated.attack.kind.name(), &records);
    Ok((cell, records))
}

/// Attack `source`, then evaluate on `target`.
pub fn transfer_eval(
    source: (&str, &ModelVariant),
    target: (&str, &ModelVariant),
    attack: &AttackConfig,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(TransferCell, Vec<InputRecord>), HarnessError> {
    let generated = attack_source(source.1, source.0, attack, images, labels)?;
    evaluate_transfer(&generated, source.1, target.1, target.0, images, labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixShape {
    /// The first model against every other one in both directions, plus every self cell.
    #[default]
    TwoWay,
    /// Every ordered pair.
    Full,
    /// Self cells only: each model attacked and evaluated on itself.
    Diagonal,
}

/// Ordered (source, target) index pairs, source-major.
pub fn matrix_pairs(n: usize, shape: MatrixShape) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for s in 0..n {
        for t in 0..n {
            let keep = match shape {
                MatrixShape::Full => true,
                MatrixShape::TwoWay => s == t || s == 0 || t == 0,
                MatrixShape::Diagonal => s == t,
            };
            if keep {
                pairs.push((s, t));
            }
        }
    }
    pairs
}

/// A cell that could not be produced, e.g. UAP against a gradient-less source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub source: String,
    pub target: String,
    pub attack: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellLog {
    pub source: String,
    pub target: String,
    pub attack: String,
    pub records: Vec<InputRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct MatrixRun {
    pub cells: Vec<TransferCell>,
    pub skipped: Vec<SkippedCell>,
    pub logs: Vec<CellLog>,
    pub uap_fooling: Vec<(String, f32)>,
}

/// Generates each (source, attack) once and replays it on every target the shape asks for.
pub fn transfer_matrix(
    models: &[(String, ModelVariant)],
    attacks: &[AttackConfig],
    shape: MatrixShape,
    images: &[Tensor],
    labels: &[usize],
) -> Result<MatrixRun, HarnessError> {
    let pairs = matrix_pairs(models.len(), shape);
    let mut run = MatrixRun::default();
    for attack in attacks {
        for (s, (sid, source)) in models.iter().enumerate() {
            let targets: Vec<usize> = pairs.iter().filter(|p| p.0 == s).map(|p| p.1).collect();
            if targets.is_empty() {
                continue;
            }
            if attack.kind.is_white_box() && !source.has_gradient() {
                for &t in &targets {
                    run.skipped.push(SkippedCell {
                        source: sid.clone(),
                        target: models[t].0.clone(),
                        attack: attack.kind.name().into(),
                        reason: format!("{} models do not expose gradients", source.kind()),
                    });
                }
                continue;
            }
            log::info!("attacking {sid} with {}", attack.id());
            let generated = attack_source(source, sid, attack, images, labels)?;
            if let Some(rate) = generated.uap_fooling_rate {
                run.uap_fooling.push((sid.clone(), rate));
            }
            for t in targets {
                let (tid, target) = &models[t];
                let (cell, records) = evaluate_transfer(&generated, source, target, tid, images, labels)?;
                run.logs.push(CellLog { source: sid.clone(), target: tid.clone(), attack: cell.attack.clone(), records });
                run.cells.push(cell);
            }
        }
    }
    Ok(run)
}

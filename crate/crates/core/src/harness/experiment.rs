//! JSON-configured pipeline: train → compress → attack → transfer → bench.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{bench_interleaved, sha256_hex, transfer_matrix, write_atomic, BenchConfig, BenchReport, CellLog, HarnessError};
use super::{MatrixRun, MatrixShape, SkippedCell, TransferCell};
use crate::attacks::{AttackConfig, AttackKind};
use crate::compress::{born_again, distill_multiplexed, quantize_dynamic, train_dynamic};
use crate::data::{synth_dataset, Dataset, ImageSpec, Split};
use crate::variant::ModelVariant;
use crate::vit::checkpoint::VERSION as CHECKPOINT_VERSION;
use crate::vit::{default_stages, train, History, LossWeights, Model, ToySize, TrainConfig, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub classes: usize,
    pub image: ImageSpec,
    /// Load a VIDS file instead of synthesising.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_per_class: 200, classes: 10, image: ImageSpec::default(), path: None }
    }
}

fn logit_distill() -> LossWeights {
    LossWeights { ce: 1.0, logit: 1.0, attn: 0.0, hidden: 0.0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiplexConfig {
    pub group_size: usize,
    pub train: TrainConfig,
    pub temperature: f32,
    pub weights: LossWeights,
}

impl Default for MultiplexConfig {
    fn default() -> Self {
        Self {
            group_size: 2,
            train: TrainConfig { epochs: 4, lr: 0.03, ..TrainConfig::default() },
            temperature: 2.0,
            weights: LossWeights { ce: 1.0, logit: 1.0, attn: 0.0, hidden: 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub train: TrainConfig,
    pub temperature: f32,
    pub weights: LossWeights,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { train: TrainConfig { seed: 7, ..TrainConfig::default() }, temperature: 2.0, weights: logit_distill() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressConfig {
    pub quantize: bool,
    /// Keep ratios, one pruned model each.
    pub prune: Vec<f64>,
    /// Blocks after which tokens are dropped; defaults to quarter points of the depth.
    pub prune_stages: Option<Vec<usize>>,
    pub prune_train: TrainConfig,
    pub prune_temperature: f32,
    /// Fine-tune the backbone along with the scorers.
    pub prune_train_base: bool,
    pub multiplex: Option<MultiplexConfig>,
    pub distill: Option<DistillConfig>,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            quantize: true,
            prune: vec![0.7, 0.6, 0.5],
            prune_stages: None,
            prune_train: TrainConfig { epochs: 3, lr: 0.02, ..TrainConfig::default() },
            prune_temperature: 2.0,
            prune_train_base: true,
            multiplex: Some(MultiplexConfig::default()),
            distill: Some(DistillConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedCheckpoint {
    pub id: String,
    pub path: PathBuf,
}

/// The whole experiment as one JSON document. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Shifts every phase seed; `--seed` overrides it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ToySize,
    pub train: TrainConfig,
    pub compress: CompressConfig,
    pub attacks: Vec<AttackConfig>,
    /// Leading images of the attack split to attack.
    pub attack_images: usize,
    pub matrix: MatrixShape,
    pub bench: Option<BenchConfig>,
    /// Use these models instead of training; the first is the reference ("original").
    pub checkpoints: Vec<NamedCheckpoint>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ToySize::ToySmall,
            train: TrainConfig::default(),
            compress: CompressConfig::default(),
            attacks: AttackKind::black_box_defaults().into_iter().map(|k| AttackConfig::new(k, 0)).collect(),
            attack_images: 200,
            matrix: MatrixShape::TwoWay,
            bench: Some(BenchConfig::default()),
            checkpoints: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.data.classes < 2 || self.data.n_per_class == 0 {
            return bad(format!("data needs >= 2 classes and >= 1 image per class, got {:?}", self.data));
        }
        if self.attack_images == 0 {
            return bad("attack_images must be >= 1".into());
        }
        if let Some(r) = self.compress.prune.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("keep ratio {r} outside (0, 1]"));
        }
        if let Some(b) = &self.bench {
            if b.repeats < 3 {
                return bad("bench.repeats must be >= 3".into());
            }
        }
        let mut ids: Vec<&str> = self.checkpoints.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("checkpoint ids must be unique".into());
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn vit_config(&self) -> ViTConfig {
        ViTConfig { num_classes: self.data.classes, image_size: self.data.image.size, channels: self.data.image.channels, ..ViTConfig::toy(self.model) }
    }

    fn phase(&self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig { seed: cfg.seed.wrapping_add(self.seed), ..cfg.clone() }
    }

    fn attacks_seeded(&self) -> Vec<AttackConfig> {
        self.attacks.iter().map(|a| AttackConfig::new(a.kind.clone(), a.seed.wrapping_add(self.seed))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressKind {
    Quantize,
    Prune,
    Multiplex,
    Distill,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let data = match &cfg.data.path {
        Some(p) => Dataset::from_vids(&fs::read(p).map_err(|e| HarnessError::io(p, e))?)?,
        None => synth_dataset(cfg.seed, cfg.data.n_per_class, cfg.data.classes, &cfg.data.image)?,
    };
    check_isolation(&data)?;
    Ok(data)
}

/// Attack images must not occur (by content) among training images.
fn check_isolation(data: &Dataset) -> Result<(), HarnessError> {
    let digest = |i: usize| sha256_hex(&data.image(i).data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
    let train: std::collections::HashSet<String> = data.indices(Split::Train).into_iter().map(digest).collect();
    for i in data.indices(Split::Attack) {
        if train.contains(&digest(i)) {
            return Err(HarnessError::AttackLeak(i));
        }
    }
    Ok(())
}

/// (id, model, training history, wall seconds)
type Built = Vec<(String, ModelVariant, Option<History>, f64)>;

/// Applies the configured compressions (or only `only`) to a trained reference model.
pub fn compress_variants(cfg: &ExperimentConfig, original: &Model, data: &Dataset, only: Option<CompressKind>) -> Result<Built, HarnessError> {
    let want = |k: CompressKind| only.map_or(true, |o| o == k);
    let c = &cfg.compress;
    let mut out: Built = Vec::new();
    if want(CompressKind::Quantize) && (c.quantize || only.is_some()) {
        let t = Instant::now();
        let q = quantize_dynamic(original);
        out.push(("quantized".into(), ModelVariant::Quantized(q), None, t.elapsed().as_secs_f64()));
    }
    if want(CompressKind::Prune) {
        let stages = c.prune_stages.clone().unwrap_or_else(|| default_stages(original.config().depth));
        for &rho in &c.prune {
            let t = Instant::now();
            let (m, h) = train_dynamic(original, data, rho, &stages, &cfg.phase(&c.prune_train), c.prune_temperature, c.prune_train_base)?;
            log::info!("pruned rho={rho} in {:.1}s", t.elapsed().as_secs_f64());
            out.push((format!("pruned-{rho}"), ModelVariant::Dynamic(m), Some(h), t.elapsed().as_secs_f64()));
        }
    }
    if want(CompressKind::Multiplex) {
        let m = c.multiplex.clone().unwrap_or_default();
        if c.multiplex.is_some() || only.is_some() {
            let t = Instant::now();
            let (mini, h) = distill_multiplexed(original, m.group_size, data, &cfg.phase(&m.train), m.weights, m.temperature)?;
            log::info!("multiplexed g={} in {:.1}s", m.group_size, t.elapsed().as_secs_f64());
            out.push(("multiplexed".into(), ModelVariant::Mini(mini), Some(h), t.elapsed().as_secs_f64()));
        }
    }
    if want(CompressKind::Distill) {
        let d = c.distill.clone().unwrap_or_default();
        if c.distill.is_some() || only.is_some() {
            let t = Instant::now();
            let tc = cfg.phase(&d.train);
            let (student, h) = born_again(original, data, &tc, d.weights, d.temperature, tc.seed.wrapping_add(1))?;
            log::info!("distilled in {:.1}s", t.elapsed().as_secs_f64());
            out.push(("distilled".into(), ModelVariant::Float(student), Some(h), t.elapsed().as_secs_f64()));
        }
    }
    Ok(out)
}

/// Files written under one output directory, with their hashes.
struct Artifacts {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl Artifacts {
    fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf(), files: BTreeMap::new() }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        write_atomic(&self.root.join(rel), bytes)?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(value).expect("serializable");
        self.write(rel, text.as_bytes())
    }

    fn finish(self, cfg: &ExperimentConfig, command: &str, extra: serde_json::Value) -> Result<(), HarnessError> {
        let manifest = json!({
            "command": command,
            "seed": cfg.seed,
            "versions": {
                "vitlab": env!("CARGO_PKG_VERSION"),
                "checkpoint_format": CHECKPOINT_VERSION,
            },
            "config": cfg,
            "files": self.files,
            "details": extra,
        });
        write_atomic(&self.root.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json").as_bytes())
    }
}

fn save_models(art: &mut Artifacts, models: &[(String, ModelVariant)]) -> Result<serde_json::Value, HarnessError> {
    let mut hashes = serde_json::Map::new();
    for (id, m) in models {
        let bytes = m.to_bytes();
        let rel = format!("checkpoints/{id}.vitc");
        art.write(&rel, &bytes)?;
        hashes.insert(id.clone(), json!({ "path": rel, "sha256": sha256_hex(&bytes), "kind": m.kind(), "payload_bytes": m.checkpoint().payload_bytes() }));
    }
    Ok(serde_json::Value::Object(hashes))
}

fn load_models(cfg: &ExperimentConfig) -> Result<Vec<(String, ModelVariant)>, HarnessError> {
    cfg.checkpoints
        .iter()
        .map(|c| {
            let bytes = fs::read(&c.path).map_err(|_| HarnessError::MissingCheckpoint { id: c.id.clone(), path: c.path.clone() })?;
            Ok((c.id.clone(), ModelVariant::from_bytes(&bytes)?))
        })
        .collect()
}

fn require_models(cfg: &ExperimentConfig, command: &str) -> Result<Vec<(String, ModelVariant)>, HarnessError> {
    if cfg.checkpoints.is_empty() {
        return Err(HarnessError::Config(format!("{command} needs at least one entry in \"checkpoints\"")));
    }
    load_models(cfg)
}

fn attack_set(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Vec<crate::tensor::Tensor>, Vec<usize>), HarnessError> {
    let atk = data.take(Split::Attack, cfg.attack_images);
    if atk.is_empty() {
        return Err(HarnessError::Config("dataset has no attack split".into()));
    }
    Ok((atk.images().to_vec(), atk.labels().to_vec()))
}

const CSV_HEADER: &str = "source,target,attack,asr_on_source,asr_on_target,n_attacked,n_eligible_source,n_eligible_target,successes_source,successes_target\n";

/// Long-format matrix; floats use the shortest representation that round-trips.
pub(crate) fn cells_csv(cells: &[TransferCell]) -> String {
    let mut s = String::from(CSV_HEADER);
    for c in cells {
        s += &format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.source, c.target, c.attack, c.asr_on_source, c.asr_on_target, c.n_attacked, c.n_eligible_source, c.n_eligible,
            c.successes_source, c.successes_target
        );
    }
    s
}

/// Rows = source, columns = target, each entry the target ASRs of every attack joined by `|`.
pub(crate) fn cells_table(cells: &[TransferCell]) -> String {
    let mut ids: Vec<&str> = Vec::new();
    let mut attacks: Vec<&str> = Vec::new();
    for c in cells {
        for id in [c.source.as_str(), c.target.as_str()] {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        if !attacks.contains(&c.attack.as_str()) {
            attacks.push(&c.attack);
        }
    }
    let mut s = format!("source\\target [{}],{}\n", attacks.join("|"), ids.join(","));
    for src in &ids {
        let row: Vec<String> = ids
            .iter()
            .map(|tgt| {
                let vals: Vec<String> = attacks
                    .iter()
                    .filter_map(|a| cells.iter().find(|c| c.source == *src && c.target == *tgt && c.attack == *a))
                    .map(|c| format!("{:.3}", c.asr_on_target))
                    .collect();
                vals.join("|")
            })
            .collect();
        s += &format!("{src},{}\n", row.join(","));
    }
    s
}

/// Compressed-vs-original comparison, emitted but never asserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub variant: String,
    pub attack: String,
    pub self_asr: f64,
    pub original_self_asr: f64,
    pub original_to_variant: Option<f64>,
    pub variant_to_original: Option<f64>,
    pub more_vulnerable_than_original: bool,
}

fn findings(cells: &[TransferCell]) -> Vec<Finding> {
    let Some(orig) = cells.first().map(|c| c.source.clone()) else { return Vec::new() };
    let find = |s: &str, t: &str, a: &str| cells.iter().find(|c| c.source == s && c.target == t && c.attack == a);
    let mut out = Vec::new();
    for c in cells.iter().filter(|c| c.source == c.target && c.source != orig) {
        let Some(base) = find(&orig, &orig, &c.attack) else { continue };
        out.push(Finding {
            variant: c.source.clone(),
            attack: c.attack.clone(),
            self_asr: c.asr_on_source,
            original_self_asr: base.asr_on_source,
            original_to_variant: find(&orig, &c.source, &c.attack).map(|x| x.asr_on_target),
            variant_to_original: find(&c.source, &orig, &c.attack).map(|x| x.asr_on_target),
            more_vulnerable_than_original: c.asr_on_source > base.asr_on_source,
        });
    }
    out
}

fn write_matrix(art: &mut Artifacts, prefix: &str, run: &MatrixRun) -> Result<(), HarnessError> {
    art.write(&format!("{prefix}_matrix.csv"), cells_csv(&run.cells).as_bytes())?;
    art.write(&format!("{prefix}_table.csv"), cells_table(&run.cells).as_bytes())?;
    let uap: BTreeMap<&str, f32> = run.uap_fooling.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    art.write_json(&format!("{prefix}_matrix.json"), &json!({ "cells": run.cells, "skipped": run.skipped, "uap_fooling_rate": uap }))?;
    art.write_json(&format!("{prefix}_outcomes.json"), &run.logs)?;
    Ok(())
}

fn write_bench(art: &mut Artifacts, reports: &[BenchReport]) -> Result<(), HarnessError> {
    let mut csv = String::from("model,kind,gflops,throughput,batch,repeats,size_bytes,val_accuracy\n");
    for r in reports {
        csv += &format!("{},{},{},{:.2},{},{},{},{}\n", r.model, r.kind, r.gflops, r.throughput, r.batch, r.repeats, r.size_bytes, r.val_accuracy);
    }
    art.write("bench.csv", csv.as_bytes())?;
    art.write_json("bench.json", reports)
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub models: Vec<(String, ModelVariant)>,
    pub histories: BTreeMap<String, History>,
    pub cells: Vec<TransferCell>,
    pub skipped: Vec<SkippedCell>,
    pub logs: Vec<CellLog>,
    pub bench: Vec<BenchReport>,
    pub findings: Vec<Finding>,
    pub timings: BTreeMap<String, f64>,
}

impl RunSummary {
    pub fn model(&self, id: &str) -> Option<&ModelVariant> {
        self.models.iter().find(|(i, _)| i == id).map(|(_, m)| m)
    }
}

fn train_original(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Model, History), HarnessError> {
    let mut model = Model::new(cfg.vit_config(), cfg.seed.wrapping_add(1))?;
    let history = train(&mut model, data, &cfg.phase(&cfg.train))?;
    Ok((model, history))
}

/// Everything, end to end. With `checkpoints` set, training and compression are skipped.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let mut summary = RunSummary::default();
    let mut clock = Instant::now();
    let mut lap = |summary: &mut RunSummary, name: &str| {
        summary.timings.insert(name.to_string(), clock.elapsed().as_secs_f64());
        log::info!("{name} done in {:.1}s", clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };
    let data = load_dataset(cfg)?;
    let mut art = Artifacts::new(out);

    if cfg.checkpoints.is_empty() {
        let (original, h) = train_original(cfg, &data)?;
        summary.histories.insert("original".into(), h);
        lap(&mut summary, "train");
        let built = compress_variants(cfg, &original, &data, None)?;
        summary.models.push(("original".into(), ModelVariant::Float(original)));
        for (id, m, h, secs) in built {
            summary.timings.insert(format!("compress:{id}"), secs);
            if let Some(h) = h {
                summary.histories.insert(id.clone(), h);
            }
            summary.models.push((id, m));
        }
        lap(&mut summary, "compress");
    } else {
        summary.models = load_models(cfg)?;
    }
    let checkpoints = save_models(&mut art, &summary.models)?;
    art.write_json("history.json", &summary.histories)?;

    let (images, labels) = attack_set(cfg, &data)?;
    let run = transfer_matrix(&summary.models, &cfg.attacks_seeded(), cfg.matrix, &images, &labels)?;
    write_matrix(&mut art, "asr", &run)?;
    summary.findings = findings(&run.cells);
    summary.cells = run.cells;
    summary.skipped = run.skipped;
    summary.logs = run.logs;
    lap(&mut summary, "attack_transfer");

    if let Some(b) = &cfg.bench {
        let models: Vec<_> = summary.models.iter().map(|(id, m)| (id.as_str(), m)).collect();
        summary.bench = bench_interleaved(&models, &data, b)?;
        write_bench(&mut art, &summary.bench)?;
        lap(&mut summary, "bench");
    }
    art.write_json("report.json", &json!({ "findings": summary.findings, "bench": summary.bench, "timings_s": summary.timings }))?;
    art.finish(cfg, "run", json!({ "checkpoints": checkpoints, "attack_images": images.len(), "dataset_sha256": sha256_hex(&data.to_vids()) }))?;
    Ok(summary)
}

/// Trains the reference model and writes `checkpoints/original.vitc`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<(Model, History), HarnessError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let (model, history) = train_original(cfg, &data)?;
    let mut art = Artifacts::new(out);
    let ck = save_models(&mut art, &[("original".into(), ModelVariant::Float(model.clone()))])?;
    art.write_json("history.json", &BTreeMap::from([("original", &history)]))?;
    art.finish(cfg, "train", json!({ "checkpoints": ck }))?;
    Ok((model, history))
}

/// Compresses the first float checkpoint in `checkpoints`.
pub fn run_compress(kind: CompressKind, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(String, ModelVariant)>, HarnessError> {
    cfg.validate()?;
    let models = require_models(cfg, "compress")?;
    let Some(original) = models.iter().find_map(|(_, m)| match m {
        ModelVariant::Float(m) => Some(m.clone()),
        _ => None,
    }) else {
        return Err(HarnessError::Config("compress needs a float checkpoint to start from".into()));
    };
    let data = load_dataset(cfg)?;
    let built = compress_variants(cfg, &original, &data, Some(kind))?;
    let mut art = Artifacts::new(out);
    let histories: BTreeMap<&str, &History> = built.iter().filter_map(|(id, _, h, _)| h.as_ref().map(|h| (id.as_str(), h))).collect();
    art.write_json("history.json", &histories)?;
    let models: Vec<(String, ModelVariant)> = built.into_iter().map(|(id, m, _, _)| (id, m)).collect();
    let ck = save_models(&mut art, &models)?;
    art.finish(cfg, "compress", json!({ "kind": kind, "checkpoints": ck }))?;
    Ok(models)
}

fn run_matrix(cfg: &ExperimentConfig, out: &Path, shape: MatrixShape, command: &str) -> Result<MatrixRun, HarnessError> {
    cfg.validate()?;
    let models = require_models(cfg, command)?;
    let data = load_dataset(cfg)?;
    let (images, labels) = attack_set(cfg, &data)?;
    let run = transfer_matrix(&models, &cfg.attacks_seeded(), shape, &images, &labels)?;
    let mut art = Artifacts::new(out);
    write_matrix(&mut art, "asr", &run)?;
    art.write_json("report.json", &json!({ "findings": findings(&run.cells) }))?;
    art.finish(cfg, command, json!({ "attack_images": images.len() }))?;
    Ok(run)
}

/// Attacks every checkpoint on itself.
pub fn run_attack(cfg: &ExperimentConfig, out: &Path) -> Result<MatrixRun, HarnessError> {
    run_matrix(cfg, out, MatrixShape::Diagonal, "attack")
}

/// Transfer matrix over the listed checkpoints, shaped by `matrix`.
pub fn run_transfer(cfg: &ExperimentConfig, out: &Path) -> Result<MatrixRun, HarnessError> {
    run_matrix(cfg, out, cfg.matrix, "transfer")
}

pub fn run_bench(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<BenchReport>, HarnessError> {
    cfg.validate()?;
    let models = require_models(cfg, "bench")?;
    let data = load_dataset(cfg)?;
    let b = cfg.bench.clone().unwrap_or_default();
    let pairs: Vec<_> = models.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let reports = bench_interleaved(&pairs, &data, &b)?;
    let mut art = Artifacts::new(out);
    write_bench(&mut art, &reports)?;
    art.finish(cfg, "bench", json!({}))?;
    Ok(reports)
}

/// Rebuilds the matrix files and findings from a persisted per-input log
/// (`asr_outcomes.json` under `out`).
pub fn run_report(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<TransferCell>, HarnessError> {
    let path = out.join("asr_outcomes.json");
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let logs: Vec<CellLog> = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let cells: Vec<TransferCell> = logs.iter().map(|l| TransferCell::from_records(&l.source, &l.target, &l.attack, &l.records)).collect();
    let mut art = Artifacts::new(out);
    art.write("asr_matrix.csv", cells_csv(&cells).as_bytes())?;
    art.write("asr_table.csv", cells_table(&cells).as_bytes())?;
    art.write_json("report.json", &json!({ "findings": findings(&cells) }))?;
    art.finish(cfg, "report", json!({ "source_log": "asr_outcomes.json" }))?;
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn schema_violations_are_config_errors() {
        for bad in [r#"{"bogus": 1}"#, r#"{"attack_images": 0}"#, r#"{"compress": {"prune": [1.5]}}"#, r#"{"bench": {"repeats": 1}}"#, "not json"] {
            let e = ExperimentConfig::from_json(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"train": {"epochs": 2}, "attacks": [{"kind": "spatial", "rot_steps": 3}]}"#).unwrap();
        assert_eq!(cfg.train, TrainConfig { epochs: 2, ..TrainConfig::default() });
        assert!(matches!(cfg.attacks[0].kind, AttackKind::Spatial { rot_steps: 3, trans_steps: 5, .. }));
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let cfg = ExperimentConfig {
            checkpoints: vec![NamedCheckpoint { id: "original".into(), path: "/nonexistent/x.vitc".into() }],
            ..ExperimentConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let e = run_bench(&cfg, dir.path()).unwrap_err();
        assert!(matches!(e, HarnessError::MissingCheckpoint { .. }));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn csv_is_recomputable_from_the_log() {
        let rec = |label, sc, sa, tc, ta| super::super::InputRecord {
            index: 0,
            label,
            source_clean: sc,
            source_adv: sa,
            target_clean: tc,
            target_adv: ta,
            queries: 1,
            param: crate::attacks::AttackParam::Identity,
        };
        let records = vec![rec(0, 0, 1, 0, 0), rec(1, 1, 1, 1, 2), rec(2, 0, 0, 2, 1)];
        let cell = TransferCell::from_records("a", "b", "spatial", &records);
        // source: inputs 0,1 eligible, 0 fooled; target: all eligible, 1 and 2 fooled
        assert_eq!((cell.asr_on_source, cell.asr_on_target), (0.5, 2.0 / 3.0));
        let csv = cells_csv(&[cell]);
        assert_eq!(csv.lines().nth(1).unwrap(), "a,b,spatial,0.5,0.6666666666666666,3,2,3,1,2");
        let back: f64 = csv.lines().nth(1).unwrap().split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(back, 2.0 / 3.0);
        let table = cells_table(&[TransferCell::from_records("a", "a", "spatial", &records)]);
        assert_eq!(table, "source\\target [spatial],a\na,0.667\n");
    }

    #[test]
    fn isolation_catches_duplicated_images() {
        let d = synth_dataset(0, 10, 2, &ImageSpec::default()).unwrap();
        check_isolation(&d).unwrap();
        let atk = d.indices(Split::Attack)[0];
        let tr = d.indices(Split::Train)[0];
        let mut images = d.images().to_vec();
        images[atk] = images[tr].clone();
        let splits = (0..d.len()).map(|i| d.split(i)).collect();
        let leak = Dataset::new(images, d.labels().to_vec(), splits, 2).unwrap();
        assert!(matches!(check_isolation(&leak), Err(HarnessError::AttackLeak(i)) if i == atk));
    }
}

//! Throughput, FLOPs and size benchmarking.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{Dataset, Split};
use crate::variant::ModelVariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { batch: 64, warmup: 3, repeats: 41 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub kind: String,
    /// Analytic forward cost in GFLOPs (multiply-adds).
    pub gflops: f64,
    /// Median images/s over the timed repeats.
    pub throughput: f64,
    pub batch: usize,
    pub repeats: usize,
    pub size_bytes: usize,
    pub val_accuracy: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Single-threaded: each repeat classifies `batch` validation images one at a time.
pub fn bench(model: &ModelVariant, id: &str, data: &Dataset, cfg: &BenchConfig) -> Result<BenchReport, HarnessError> {
    Ok(bench_interleaved(&[(id, model)], data, cfg)?.remove(0))
}

/// Benchmarks several models round-robin: every repeat times each model once,
/// so slow drift on the host is shared instead of landing on whichever model
/// happened to be measured during it.
pub fn bench_interleaved(models: &[(&str, &ModelVariant)], data: &Dataset, cfg: &BenchConfig) -> Result<Vec<BenchReport>, HarnessError> {
    if cfg.repeats < 3 || cfg.batch == 0 {
        return Err(HarnessError::Config(format!("bench needs repeats >= 3 and batch >= 1, got {cfg:?}")));
    }
    let val = data.indices(Split::Val);
    if val.is_empty() {
        return Err(HarnessError::Config("bench needs a validation split".into()));
    }
    let batch: Vec<_> = val.iter().cycle().take(cfg.batch).map(|&i| data.image(i)).collect();
    let run = |model: &ModelVariant| -> Result<f64, HarnessError> {
        let t = Instant::now();
        for x in &batch {
            std::hint::black_box(model.logits(x)?);
        }
        Ok(cfg.batch as f64 / t.elapsed().as_secs_f64())
    };
    for _ in 0..cfg.warmup {
        for (_, m) in models {
            run(m)?;
        }
    }
    let mut rates = vec![Vec::with_capacity(cfg.repeats); models.len()];
    for _ in 0..cfg.repeats {
        for (r, (_, m)) in rates.iter_mut().zip(models) {
            r.push(run(m)?);
        }
    }
    models
        .iter()
        .zip(rates)
        .map(|((id, model), rates)| {
            let correct = val.iter().map(|&i| model.classify(data.image(i)).map(|p| p == data.label(i))).collect::<Result<Vec<_>, _>>()?;
            Ok(BenchReport {
                model: id.to_string(),
                kind: model.kind().to_string(),
                gflops: model.flops() as f64 / 1e9,
                throughput: median(rates),
                batch: cfg.batch,
                repeats: cfg.repeats,
                size_bytes: crate::compress::model_size_bytes(model),
                val_accuracy: correct.iter().filter(|&&c| c).count() as f64 / val.len() as f64,
            })
        })
        .collect()
}

//! Two-way transfer between a float model and its int8 copy.
//!
//! cargo run --release --example transfer -- [model.vitc]

use vitlab::attacks::{AttackConfig, AttackKind, UapConfig};
use vitlab::compress::quantize_dynamic;
use vitlab::data::{synth_dataset, Dataset, ImageSpec, Split};
use vitlab::harness::{transfer_matrix, MatrixShape};
use vitlab::variant::ModelVariant;
use vitlab::vit::checkpoint::load_checkpoint;
use vitlab::vit::{train, Model, TrainConfig, ViTConfig};

fn reference(data: &Dataset, path: Option<String>) -> anyhow::Result<Model> {
    if let Some(p) = path {
        return Ok(load_checkpoint(&std::fs::read(p)?)?);
    }
    let mut m = Model::new(ViTConfig::toy_small(), 0)?;
    train(&mut m, data, &TrainConfig { epochs: 4, ..TrainConfig::default() })?;
    Ok(m)
}

fn main() -> anyhow::Result<()> {
    let data = synth_dataset(0, 200, 10, &ImageSpec::default())?;
    let model = reference(&data, std::env::args().nth(1))?;
    let quant = quantize_dynamic(&model);
    let models = vec![("original".to_string(), ModelVariant::Float(model)), ("quantized".to_string(), ModelVariant::Quantized(quant))];

    let mut attacks: Vec<AttackConfig> = AttackKind::black_box_defaults().into_iter().map(|k| AttackConfig::new(k, 0)).collect();
    attacks.push(AttackConfig::new(AttackKind::Uap(UapConfig::new(8.0 / 255.0)), 0));
    let atk = data.take(Split::Attack, 60);
    let run = transfer_matrix(&models, &attacks, MatrixShape::Full, atk.images(), atk.labels())?;

    println!("{:<10} {:<10} {:<14} {:>8} {:>8}", "source", "target", "attack", "on src", "on tgt");
    for c in &run.cells {
        println!("{:<10} {:<10} {:<14} {:>8.3} {:>8.3}", c.source, c.target, c.attack, c.asr_on_source, c.asr_on_target);
    }
    for s in &run.skipped {
        println!("{:<10} {:<10} {:<14} skipped: {}", s.source, s.target, s.attack, s.reason);
    }
    Ok(())
}

//! Weight multiplexing with distillation recovery, and a born-again DeiT-style student.
//!
//! cargo run --release --example multiplex_distill -- [model.vitc]

use vitlab::compress::{born_again, distill_multiplexed};
use vitlab::data::{synth_dataset, Dataset, ImageSpec, Split};
use vitlab::vit::checkpoint::load_checkpoint;
use vitlab::vit::train::accuracy;
use vitlab::vit::{train, LossWeights, Model, TrainConfig, ViTConfig};

fn reference(data: &Dataset, path: Option<String>) -> anyhow::Result<Model> {
    if let Some(p) = path {
        return Ok(load_checkpoint(&std::fs::read(p)?)?);
    }
    let mut m = Model::new(ViTConfig::toy_small(), 0)?;
    train(&mut m, data, &TrainConfig { epochs: 4, ..TrainConfig::default() })?;
    Ok(m)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let data = synth_dataset(0, 200, 10, &ImageSpec::default())?;
    let teacher = reference(&data, std::env::args().nth(1))?;
    println!("teacher: {} params, val {:.3}", teacher.num_params(), accuracy(&teacher, &data, Split::Val)?);

    let weights = LossWeights { ce: 1.0, logit: 1.0, attn: 0.0, hidden: 1.0 };
    let cfg = TrainConfig { epochs: 3, lr: 0.03, ..TrainConfig::default() };
    let (mini, _) = distill_multiplexed(&teacher, 2, &data, &cfg, weights, 2.0)?;
    println!(
        "multiplexed g=2: {} params ({} in blocks vs {}), val {:.3}",
        mini.num_params(),
        mini.block_params(),
        teacher.config().depth * teacher.config().block_param_count(),
        accuracy(&mini, &data, Split::Val)?
    );

    let cfg = TrainConfig { epochs: 4, seed: 7, ..TrainConfig::default() };
    let (student, history) = born_again(&teacher, &data, &cfg, LossWeights { ce: 1.0, logit: 1.0, attn: 0.0, hidden: 0.0 }, 2.0, 8)?;
    for e in &history.epochs {
        println!("  born-again epoch {}: ce {:.3} kl {:.3} val {:.3}", e.epoch, e.ce, e.logit, e.val_accuracy.unwrap_or(0.0));
    }
    println!("born-again student (distillation token): val {:.3}", accuracy(&student, &data, Split::Val)?);
    Ok(())
}

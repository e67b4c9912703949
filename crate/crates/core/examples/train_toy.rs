//! Train toy-small on the synthetic gratings and save a checkpoint.
//!
//! cargo run --release --example train_toy -- [epochs] [out.vitc]

use std::time::Instant;

use vitlab::data::{synth_dataset, ImageSpec, Split};
use vitlab::vit::checkpoint::save_checkpoint;
use vitlab::vit::train::accuracy;
use vitlab::vit::{train, Model, TrainConfig, ViTConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(15);
    let out = args.next();

    let data = synth_dataset(0, 200, 10, &ImageSpec::default())?;
    let mut model = Model::new(ViTConfig::toy_small(), 0)?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let start = Instant::now();
    let history = train(&mut model, &data, &cfg)?;
    for e in &history.epochs {
        println!("epoch {:>2}  loss {:.4}  train {:.3}  val {:.3}", e.epoch, e.loss, e.accuracy, e.val_accuracy.unwrap_or(0.0));
    }
    println!("val accuracy {:.3} after {:.1?}", accuracy(&model, &data, Split::Val)?, start.elapsed());
    if let Some(path) = out {
        std::fs::write(&path, save_checkpoint(&model))?;
        println!("wrote {path}");
    }
    Ok(())
}

//! Dynamic token pruning: keep schedules, FLOPs at DeiT-S and toy scale, and
//! measured throughput of fine-tuned pruned toy models.
//!
//! cargo run --release --example prune -- [model.vitc]

use vitlab::compress::train_dynamic;
use vitlab::data::{synth_dataset, Dataset, ImageSpec, Split};
use vitlab::harness::{bench, BenchConfig};
use vitlab::variant::ModelVariant;
use vitlab::vit::checkpoint::load_checkpoint;
use vitlab::vit::{count_flops, default_stages, train, KeepSchedule, Model, TrainConfig, ViTConfig};

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
    let deit = ViTConfig::deit_small();
    let stages = default_stages(deit.depth);
    println!("DeiT-S, pruning after blocks {stages:?}");
    for rho in [1.0, 0.7, 0.6, 0.5] {
        let s = KeepSchedule::uniform(rho, &stages);
        println!("  rho {rho:.1}: live patches {:?}, {:.2} GFLOPs", s.live_counts(deit.num_patches()), count_flops(&deit, Some(&s)) as f64 / 1e9);
    }

    let data = synth_dataset(0, 200, 10, &ImageSpec::default())?;
    let base = reference(&data, std::env::args().nth(1))?;
    let stages = default_stages(base.config().depth);
    let tune = TrainConfig { epochs: 2, lr: 0.02, ..TrainConfig::default() };
    let cfg = BenchConfig::default();
    let r = bench(&ModelVariant::Float(base.clone()), "rho-1.0", &data, &cfg)?;
    println!("toy-small rho 1.0: {:.4} GFLOPs, {:.0} img/s, val {:.3}", r.gflops, r.throughput, r.val_accuracy);
    for rho in [0.7, 0.6, 0.5] {
        let (m, _) = train_dynamic(&base, &data, rho, &stages, &tune, 2.0, true)?;
        let kept = m.kept_tokens(data.image(data.indices(Split::Val)[0]))?;
        let v = ModelVariant::Dynamic(m);
        let r = bench(&v, &format!("rho-{rho}"), &data, &cfg)?;
        println!(
            "toy-small rho {rho}: {:.4} GFLOPs, {:.0} img/s, val {:.3}, kept patches per stage {:?}",
            r.gflops,
            r.throughput,
            r.val_accuracy,
            kept.iter().map(Vec::len).collect::<Vec<_>>()
        );
    }
    Ok(())
}

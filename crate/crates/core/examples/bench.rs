//! FLOPs / size / throughput table for every toy variant of a freshly initialised model.
//!
//! cargo run --release --example bench

use vitlab::compress::{multiplex, prunify, quantize_dynamic};
use vitlab::data::{synth_dataset, ImageSpec};
use vitlab::harness::{bench, BenchConfig};
use vitlab::variant::ModelVariant;
use vitlab::vit::{default_stages, Model, ViTConfig};

fn main() -> anyhow::Result<()> {
    let data = synth_dataset(0, 20, 10, &ImageSpec::default())?;
    let m = Model::new(ViTConfig::toy_small(), 0)?;
    let stages = default_stages(m.config().depth);
    let mut variants = vec![("original".to_string(), ModelVariant::Float(m.clone())), ("quantized".into(), ModelVariant::Quantized(quantize_dynamic(&m)))];
    for rho in [0.7, 0.6, 0.5] {
        variants.push((format!("pruned-{rho}"), ModelVariant::Dynamic(prunify(&m, rho, &stages, 0)?)));
    }
    variants.push(("multiplexed".into(), ModelVariant::Mini(multiplex(&m, 2)?)));

    println!("{:<12} {:>9} {:>10} {:>10}", "model", "MFLOPs", "img/s", "bytes");
    for (id, v) in &variants {
        let r = bench(v, id, &data, &BenchConfig::default())?;
        println!("{:<12} {:>9.2} {:>10.0} {:>10}", id, r.gflops * 1e3, r.throughput, r.size_bytes);
    }
    Ok(())
}

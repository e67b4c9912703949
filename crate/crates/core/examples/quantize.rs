//! Dynamic int8 quantization: size, weight error, accuracy, and the loss of gradients.
//!
//! cargo run --release --example quantize -- [model.vitc]

use vitlab::compress::{model_size_bytes, quantize_dynamic, quant::QLeaf};
use vitlab::data::{synth_dataset, Dataset, ImageSpec, Split};
use vitlab::variant::ModelVariant;
use vitlab::vit::checkpoint::load_checkpoint;
use vitlab::vit::params::named_leaves;
use vitlab::vit::{train, Model, TrainConfig, ViTConfig};

fn reference(data: &Dataset, path: Option<String>) -> anyhow::Result<Model> {
    if let Some(p) = path {
        return Ok(load_checkpoint(&std::fs::read(p)?)?);
    }
    let mut m = Model::new(ViTConfig::toy_small(), 0)?;
    train(&mut m, data, &TrainConfig { epochs: 4, ..TrainConfig::default() })?;
    Ok(m)
}

fn accuracy(m: &ModelVariant, data: &Dataset) -> anyhow::Result<f64> {
    let idx = data.indices(Split::Val);
    let mut ok = 0;
    for &i in &idx {
        ok += (m.classify(data.image(i))? == data.label(i)) as usize;
    }
    Ok(ok as f64 / idx.len() as f64)
}

fn main() -> anyhow::Result<()> {
    let data = synth_dataset(0, 200, 10, &ImageSpec::default())?;
    let model = reference(&data, std::env::args().nth(1))?;
    let q = quantize_dynamic(&model);

    let mut worst = 0.0f32;
    for (name, leaf) in named_leaves(q.params()) {
        if let QLeaf::I8(t) = leaf {
            let w = named_leaves(model.params()).into_iter().find(|(n, _)| *n == name).unwrap().1;
            let err = t.dequantize().max_abs_diff(w) / t.scale;
            worst = worst.max(err);
        }
    }
    println!("worst |w - q*scale| / scale over int8 tensors: {worst:.4} (bound 0.5)");

    let float = ModelVariant::Float(model);
    let quant = ModelVariant::Quantized(q);
    let (fb, qb) = (model_size_bytes(&float), model_size_bytes(&quant));
    println!("payload: float {fb} B, int8 {qb} B, ratio {:.2}", fb as f64 / qb as f64);
    println!("val accuracy: float {:.3}, int8 {:.3}", accuracy(&float, &data)?, accuracy(&quant, &data)?);

    let x = data.image(data.indices(Split::Attack)[0]);
    match quant.input_gradient(x, 0) {
        Err(e) => println!("gradient query on int8 model: {e}"),
        Ok(_) => println!("unexpected: int8 model returned a gradient"),
    }
    Ok(())
}

//! The four attacks on a handful of attack-split images, outcomes as JSON lines.
//!
//! cargo run --release --example attacks -- [model.vitc]

use vitlab::attacks::{
    blended_noise_attack, fooling_rate, random_sign_perturbation, salt_pepper_attack, spatial_attack, uap_craft,
    SpatialGrid, UapConfig,
};
use vitlab::data::{synth_dataset, Dataset, ImageSpec, Split};
use vitlab::harness::input_seed;
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
    let atk = data.take(Split::Attack, 40);

    for i in 0..5 {
        let (x, y) = (atk.image(i), atk.label(i));
        let seed = input_seed(0, i);
        let outcomes = [
            ("spatial", spatial_attack(&model, x, y, &SpatialGrid::default())?),
            ("salt_pepper", salt_pepper_attack(&model, x, y, 50, seed)?),
            ("blended_noise", blended_noise_attack(&model, x, y, 5, 20, seed)?),
        ];
        for (name, o) in outcomes {
            println!("{{\"input\":{i},\"attack\":\"{name}\",\"outcome\":{}}}", serde_json::to_string(&o)?);
        }
    }

    let cfg = UapConfig { epsilon: 8.0 / 255.0, max_epochs: 5, step_size: 2.0 / 255.0 };
    let uap = uap_craft(&model, atk.images(), atk.labels(), &cfg, 0)?;
    let random = random_sign_perturbation(atk.image(0).shape(), cfg.epsilon, 0);
    println!(
        "uap: fooling rate {:.3} after {} epochs (|v|_inf = {:.4}); random sign vector: {:.3}",
        uap.fooling_rate,
        uap.epochs,
        uap.linf(),
        fooling_rate(&model, atk.images(), &random)?
    );
    Ok(())
}

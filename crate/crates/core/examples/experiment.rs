//! Runs a JSON-configured experiment end to end and prints the ASR table.
//!
//! cargo run --release --example experiment -- [config.json] [out_dir]

use std::path::PathBuf;

use vitlab::harness::{run_experiment, ExperimentConfig};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::from_json(include_str!("../configs/minimal.json"))?,
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("vitlab-experiment"));
    let summary = run_experiment(&cfg, &out)?;
    print!("{}", std::fs::read_to_string(out.join("asr_table.csv"))?);
    for f in &summary.findings {
        println!(
            "{} / {}: self ASR {:.3} vs original {:.3}{}",
            f.variant,
            f.attack,
            f.self_asr,
            f.original_self_asr,
            if f.more_vulnerable_than_original { " (more vulnerable)" } else { "" }
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vitlab::harness::{self, CompressKind, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "vitlab", version, about = "Toy ViT compression and adversarial transfer experiments")]
struct Cli {
    /// Experiment config (JSON). Missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; receives all artifacts and manifest.json.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference model.
    Train,
    /// Compress the first float checkpoint listed in the config.
    Compress {
        #[arg(value_enum)]
        method: Method,
    },
    /// Attack every listed checkpoint on itself.
    Attack,
    /// Transfer matrix over the listed checkpoints.
    Transfer,
    /// Throughput / FLOPs / size table.
    Bench,
    /// Rebuild matrix and findings from <out>/asr_outcomes.json.
    Report,
    /// Full pipeline: train, compress, attack, transfer, bench.
    Run,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Quantize,
    Prune,
    Multiplex,
    Distill,
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = &cli.out;
    match &cli.command {
        Command::Train => {
            let (_, history) = harness::run_train(&cfg, out)?;
            if let Some(last) = history.last() {
                println!("trained: loss {:.4}, val accuracy {:?}", last.loss, last.val_accuracy);
            }
        }
        Command::Compress { method } => {
            let kind = match method {
                Method::Quantize => CompressKind::Quantize,
                Method::Prune => CompressKind::Prune,
                Method::Multiplex => CompressKind::Multiplex,
                Method::Distill => CompressKind::Distill,
            };
            for (id, m) in harness::run_compress(kind, &cfg, out)? {
                println!("{id}: {} bytes", m.checkpoint().payload_bytes());
            }
        }
        Command::Attack | Command::Transfer => {
            let run = if matches!(cli.command, Command::Attack) { harness::run_attack(&cfg, out)? } else { harness::run_transfer(&cfg, out)? };
            for c in &run.cells {
                println!("{} -> {} [{}]: {:.3} / {:.3}", c.source, c.target, c.attack, c.asr_on_source, c.asr_on_target);
            }
            for s in &run.skipped {
                println!("{} -> {} [{}]: skipped ({})", s.source, s.target, s.attack, s.reason);
            }
        }
        Command::Bench => {
            for r in harness::run_bench(&cfg, out)? {
                println!("{}: {:.3} GFLOPs, {:.1} img/s, {} bytes, val {:.3}", r.model, r.gflops, r.throughput, r.size_bytes, r.val_accuracy);
            }
        }
        Command::Report => {
            let cells = harness::run_report(&cfg, out)?;
            println!("rebuilt {} cells", cells.len());
        }
        Command::Run => {
            let s = harness::run_experiment(&cfg, out)?;
            println!("{} models, {} cells, {} skipped; artifacts in {}", s.models.len(), s.cells.len(), s.skipped.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

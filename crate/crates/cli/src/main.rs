use std::path::PathBuf;

use anyhow::Result;
use bestformer_cli::commands::{parse_sizes, DataFormat, Split};
use bestformer_cli::{bench, eval, inspect, pack_teacher_logits, train, Overrides, RunConfig};
use clap::{Parser, Subcommand};

/// Binary spiking transformer: training, evaluation and kernel tools.
///
/// Log verbosity follows BESTFORMER_LOG (e.g. `debug`, default `info`).
#[derive(Parser, Debug)]
#[command(name = "bestformer", version)]
struct Cli {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset file replacing the configured source.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Format of --dataset: labeled_csv or raw_tensor_binary (inferred from the extension).
    #[arg(long, global = true)]
    format: Option<DataFormat>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, metrics and a summary.
    Train,
    /// Accuracy and cost of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Packed versus float projection throughput and weight memory.
    Bench {
        /// Comma-separated ROWSxCOLS weight shapes.
        #[arg(long, default_value = "512x512,1x65,384x1536")]
        sizes: String,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
    /// Per-block value-set size and entropy records.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Cache a teacher's logits on the training split.
    PackTeacherLogits {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BESTFORMER_LOG", "info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        dataset: cli.dataset.clone(),
        format: cli.format,
    }
    .apply(&mut cfg)?;

    match cli.cmd {
        Command::Train => {
            let s = train(&cfg)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Eval { checkpoint, split } => {
            let r = eval(&cfg, &checkpoint, split)?;
            println!(
                "accuracy {:.4} | SOPs {:.6} G | NS-ACE {:.6} G | model size {:.6} MB",
                r.accuracy, r.cost.sops_g, r.cost.ns_ace_g, r.cost.model_size_mb
            );
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Bench { sizes, batch, iters } => {
            let rows = bench(&parse_sizes(&sizes)?, batch, iters, cfg.seed)?;
            println!(
                "{:>6} {:>6} {:>12} {:>12} {:>8} {:>8} {:>6}",
                "rows", "cols", "packed_us", "float_us", "speedup", "memory", "equal"
            );
            for r in &rows {
                println!(
                    "{:>6} {:>6} {:>12.1} {:>12.1} {:>8.2} {:>8.2} {:>6}",
                    r.rows, r.cols, r.packed_us, r.reference_us, r.speedup, r.memory_ratio, r.outputs_equal
                );
            }
            anyhow::ensure!(
                rows.iter().all(|r| r.outputs_equal),
                "packed and float projections disagree"
            );
        }
        Command::Inspect { checkpoint, batch } => {
            for r in inspect(&cfg, &checkpoint, batch)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::PackTeacherLogits { checkpoint } => {
            println!("{}", pack_teacher_logits(&cfg, &checkpoint)?.display());
        }
    }
    Ok(())
}

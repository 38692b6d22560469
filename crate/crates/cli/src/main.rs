use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lottery_landscape::harness::{self, ExperimentConfig, RunOptions};
use lottery_landscape::Error;

#[derive(Parser)]
#[command(name = "lottery-landscape", version, about = "Loss surfaces and lottery tickets at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Threads used for surface evaluation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Overrides the config's top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base directory for relative dataset paths.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Grid points per axis.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write its checkpoint and report.
    Train(Common),
    /// Compute a loss surface around a checkpoint.
    Surface {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict directions and parameters to this ticket's mask.
        #[arg(long)]
        ticket: Option<PathBuf>,
    },
    /// Surfaces at increasing evaluation-subset sizes with shared directions.
    SweepEvalcount {
        #[command(flatten)]
        common: Common,
        /// Trains from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Train once per batch size and compare accuracies and surfaces.
    SweepBatchsize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Iterative magnitude pruning against per-layer-matched random masks.
    ImpCompare(Common),
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, RunOptions), Error> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(dir) = &c.data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    cfg.validate()?;
    let opts = RunOptions {
        workers: c.workers,
        resolution: c.resolution,
    };
    Ok((cfg, opts))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("summary serializes"));
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut log = |line: &str| println!("{line}");
    match cli.command {
        Command::Train(c) => {
            let (cfg, _) = load_config(&c)?;
            let out = harness::cmd_train(&cfg, &mut log)?;
            print_json(&serde_json::json!({
                "checkpoint": out.checkpoint_path,
                "report": out.report_path,
                "test_accuracy": out.summary.test_accuracy,
                "checkpoint_digest": out.summary.checkpoint_digest,
            }));
        }
        Command::Surface {
            common,
            checkpoint,
            ticket,
        } => {
            let (cfg, opts) = load_config(&common)?;
            for s in harness::cmd_surface(&cfg, &checkpoint, ticket.as_deref(), &opts, &mut log)? {
                print_json(&serde_json::json!({ "files": s.files, "stats": s.stats }));
            }
        }
        Command::SweepEvalcount {
            common,
            checkpoint,
            counts,
        } => {
            let (cfg, opts) = load_config(&common)?;
            let (report, _) =
                harness::cmd_sweep_evalcount(&cfg, checkpoint.as_deref(), counts.as_deref(), &opts, &mut log)?;
            print_json(&report);
        }
        Command::SweepBatchsize { common, sizes } => {
            let (cfg, opts) = load_config(&common)?;
            print_json(&harness::cmd_sweep_batchsize(&cfg, sizes.as_deref(), &opts, &mut log)?);
        }
        Command::ImpCompare(c) => {
            let (cfg, opts) = load_config(&c)?;
            print_json(&harness::cmd_imp_compare(&cfg, &opts, &mut log)?.report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}

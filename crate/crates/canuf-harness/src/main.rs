use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use canuf_harness::commands;
use canuf_harness::config::ExperimentConfig;
use canuf_harness::error::exit_code_of;

#[derive(Parser)]
#[command(
    name = "canuf",
    about = "Constraint-aware probabilistic regression experiments",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run constraint extraction and write the accepted DSL file.
    Extract,
    /// Train a model and write a checkpoint plus the training log.
    Train,
    /// Evaluate a checkpoint: metric report, reliability CSV, per-sample CSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the component-toggle ablation grid across seeds.
    Ablate,
    /// Evaluate calibration across distribution-shift severities.
    ShiftSweep,
    /// Generate template explanations for projected test predictions.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    match &cli.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            let base = path
                .parent()
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."));
            Ok((cfg, base))
        }
        None => Ok((ExperimentConfig::default(), PathBuf::from("."))),
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let (mut cfg, base) = load_config(cli)?;
    if let Some(seed) = cli.seed {
        cfg.harness.seed = seed;
    }
    let seed = cfg.harness.seed;
    match &cli.command {
        Command::Extract => commands::cmd_extract(&cfg, &base, seed, &cli.out),
        Command::Train => commands::cmd_train(&cfg, &base, seed, &cli.out).map(|_| ()),
        Command::Evaluate { checkpoint } => {
            commands::cmd_evaluate(&cfg, &base, checkpoint, seed, &cli.out).map(|_| ())
        }
        Command::Ablate => commands::cmd_ablate(&cfg, &base, &cli.out).map(|_| ()),
        Command::ShiftSweep => {
            let severities = cfg.harness.severities.clone();
            commands::cmd_shift_sweep(&cfg, &base, &severities, &cli.out).map(|_| ())
        }
        Command::Explain { checkpoint } => {
            commands::cmd_explain(&cfg, &base, checkpoint, seed, &cli.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1 (keeping 2 for data errors).
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_of(&err) as u8)
        }
    }
}

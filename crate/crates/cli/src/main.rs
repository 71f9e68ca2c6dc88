use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mmpda_cli::commands::{self, Loaded};
use mmpda_cli::{log, CliResult};

#[derive(Parser)]
#[command(name = "mmpda", version, about = "Multi-source multimodal domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write generator-backed domains as CSV.
    Generate(Common),
    /// Train once per seed; write reports, checkpoints and a summary.
    Train(Common),
    /// Score a checkpoint on the configured (labelled) target domain.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// CORAL distances between all configured domains.
    Gapmatrix {
        #[command(flatten)]
        common: Common,
        /// Measure fused features of this checkpoint instead of raw inputs.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and parameter gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid or preset sweep over adaptation weights.
    Sweep(Common),
}

fn load(c: Common) -> CliResult<Loaded> {
    Loaded::from_args(&c.config, c.seed, c.out)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(c) => {
            let paths = commands::generate(&load(c)?)?;
            log::info("generate_finished", json!({"files": paths.len()}));
        }
        Command::Train(c) => {
            let summary = commands::train(&load(c)?)?;
            log::info(
                "train_finished",
                json!({"runs": summary.runs.len(), "accuracy": summary.accuracy, "f1": summary.f1}),
            );
        }
        Command::Evaluate { common, checkpoint } => {
            let m = commands::evaluate(&load(common)?, &checkpoint)?;
            println!("{}", serde_json::to_string(&m).expect("metrics serialize"));
        }
        Command::Gapmatrix { common, checkpoint } => {
            let g = commands::gapmatrix(&load(common)?, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string(&g).expect("matrix serializes"));
        }
        Command::Gradcheck { seed, out } => {
            commands::gradcheck(seed, out.as_deref())?;
        }
        Command::Sweep(c) => {
            let path = commands::sweep(&load(c)?)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error("failed", json!({"error": e.to_string()}));
            e.exit_code()
        }
    }
}

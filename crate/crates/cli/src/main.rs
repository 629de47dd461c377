//! `lipcast`: batch driver for pretraining, training, forecasting,
//! benchmarking, gradient checking and ablations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};

use commands::{Ctx, Failure};
use config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "lipcast", version, about = "Lightweight patch-wise forecaster with covariate pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "LIPCAST_THREADS")]
    threads: Option<usize>,
    /// Add layer normalization back.
    #[arg(long, global = true)]
    with_ln: bool,
    /// Add the feed-forward block back.
    #[arg(long, global = true)]
    with_ffn: bool,
    /// Add positional encoding back.
    #[arg(long, global = true)]
    with_pe: bool,
    /// Pretraining checkpoint for `train`, trained model for `predict`/`bench`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Corrupt one backward rule (gradient checker negative control).
    #[arg(long, global = true, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Contrastive pretraining of the covariate and target encoders.
    Pretrain,
    /// Train the forecaster, optionally on a pretrained covariate encoder.
    Train,
    /// Forecast the final test window from a trained checkpoint.
    Predict,
    /// Parameters, MACs, inference and epoch timing.
    Bench,
    /// Finite-difference check of every op and the composed model.
    Gradcheck,
    /// Compare the config against a variant with components added back.
    Ablate,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = match cli.threads {
        Some(0) => return Err(Failure::Validation(anyhow!("--threads must be at least 1"))),
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.into()))?;
            n
        }
        None => rayon::current_num_threads(),
    };
    let ctx = Ctx {
        config_path: cli.config,
        overrides: Overrides { out: cli.out, seed: cli.seed, with_ln: cli.with_ln, with_ffn: cli.with_ffn, with_pe: cli.with_pe },
        checkpoint: cli.checkpoint,
        threads,
    };
    match cli.command {
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Predict => commands::predict(&ctx),
        Command::Bench => commands::bench(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx, cli.inject_fault.as_deref()),
        Command::Ablate => commands::ablate(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error: validation: {first}");
            eprintln!("{}", Cli::command().render_usage());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}

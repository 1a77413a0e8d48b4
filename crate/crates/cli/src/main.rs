//! `mdd`: dataset generation, training, sampling and evaluation protocols.

mod commands;
mod config;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "mdd", version, about = "Multi-domain diffusion experiments")]
struct Cli {
    /// Worker threads for data generation, training and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts.
#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Any config key, as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Output path. Defaults to a location under $MDD_OUT_ROOT (or `runs`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a TriShape dataset file.
    Dataset(commands::dataset::DatasetArgs),
    /// Train a denoiser on a dataset file.
    Train(commands::train::TrainArgs),
    /// Translate rendered test points with a checkpoint.
    Sample(commands::sample::SampleArgs),
    /// Evaluate existing checkpoints with one protocol.
    Eval(commands::eval::EvalArgs),
    /// Train missing cells, then evaluate them with one protocol.
    Sweep(commands::eval::EvalArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(config::config_error("--workers must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config::config_error(format!("cannot size the worker pool: {e}")))?;
    }
    match cli.command {
        Command::Dataset(a) => commands::dataset::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Sample(a) => commands::sample::run(a),
        Command::Eval(a) => commands::eval::run(a, false),
        Command::Sweep(a) => commands::eval::run(a, true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{cmd_bench, cmd_eval, cmd_simulate, cmd_train, Options};

/// Finite-horizon ADP for vehicle path tracking.
#[derive(Debug, Parser)]
#[command(name = "hjbadp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy for every configured seed.
    Train(Common),
    /// Score a checkpoint against the LQ oracle.
    Eval(Common),
    /// Run closed-loop tracking for the configured controllers.
    Simulate(Common),
    /// Time policy inference against LQ solves over a horizon sweep.
    Bench(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Trained policy checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory, overriding `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl From<Common> for Options {
    fn from(c: Common) -> Self {
        Options {
            config: c.config,
            checkpoint: c.checkpoint,
            out: c.out,
            seed_override: c.seed_override,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    hjb_adp::parallel::init_from_env();
    let result = match cli.command {
        Command::Train(c) => cmd_train(&c.into()),
        Command::Eval(c) => cmd_eval(&c.into()),
        Command::Simulate(c) => cmd_simulate(&c.into()),
        Command::Bench(c) => cmd_bench(&c.into()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hjbadp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use heartbrain_cli::{cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, read_config, CliError, DEFAULT_N_COMPLETE};

#[derive(Debug, Parser)]
#[command(name = "heartbrain", version, about = "Cardiac imputation and lumped-model emulation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint model on the complete partition of a cohort.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value_t = DEFAULT_N_COMPLETE)]
        n_complete: usize,
        /// JSON training configuration; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score joint imputation and emulation against the baselines.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one conditioning variable and simulate along the grid.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        variable: String,
        #[arg(long, default_value_t = 9)]
        n_points: usize,
        #[arg(long, default_value_t = 256)]
        n_mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { n, seed, out } => cmd_generate(n, seed, &out).map(drop),
        Command::Train { cohort, n_complete, config, seed, out } => {
            let config = read_config(config.as_deref())?;
            cmd_train(&cohort, n_complete, &config, seed, &out).map(drop)
        }
        Command::Evaluate { cohort, checkpoint, n_samples, seed, out } => {
            cmd_evaluate(&cohort, &checkpoint, seed, n_samples, &out).map(drop)
        }
        Command::Sweep { checkpoint, cohort, variable, n_points, n_mc, seed, out } => {
            cmd_sweep(&checkpoint, &cohort, &variable, n_points, n_mc, seed, &out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use indexnet_cli::commands::{self, TrainOptions};
use indexnet_cli::CliResult;

/// Train, evaluate and gradient-check indexnet networks.
///
/// Exit status: 0 success, 1 other failure, 2 config error, 3 data or
/// checkpoint error, 4 numeric failure (non-finite loss), 5 failed gradient check.
#[derive(Parser)]
#[command(name = "indexnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config; writes metrics.csv and checkpoint.ckpt.
    ///
    /// Delimited data files hold one sample per line, comma-separated, with
    /// the target column(s) last; `#` lines and a non-numeric header are skipped.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's epoch count.
        #[arg(long)]
        epochs: Option<u64>,
        /// Continue from a checkpoint of the same model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print loss and accuracy of a checkpoint on a data set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A file in the training data's format, or `train` / `eval` for the config's splits.
        #[arg(long)]
        data: String,
        /// IDX labels accompanying IDX images.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Check every parameter gradient against central finite differences on a synthetic batch.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Relative-error threshold (default 1e-5).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Print a checkpoint's shapes and parameter counts.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Train { config, seed, out: dir, epochs, resume } => {
            commands::train(&TrainOptions { config, seed, out: dir, epochs, resume }, &mut out).map(|_| ())
        }
        Command::Eval { checkpoint, data, labels } => commands::eval(&checkpoint, &data, labels.as_deref(), &mut out).map(|_| ()),
        Command::Gradcheck { config, threshold } => commands::gradcheck(&config, threshold, &mut out).map(|_| ()),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint, &mut out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("indexnet: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

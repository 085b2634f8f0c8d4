//! The `physmamba` command line: synthetic data, training, evaluation,
//! verification suites, profiling and plotting.

pub mod commands;
pub mod error;
pub mod settings;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{exit, CliError, CliResult};
pub use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "physmamba", version, about = "Remote pulse estimation with a two-stream temporal-difference Mamba network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train on a dataset, writing `loss.csv` and per-epoch checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from this checkpoint directory.
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: per-clip rates, summary metrics and plots.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory.
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks for every operation and a small network.
    Gradcheck {
        /// Check every coordinate of every operation and more network parameters.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Equivalence checks for the recurrent, convolutional and selective scans.
    Scancheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter count and multiply-accumulates for one input size.
    Profile {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input extent as `TxHxW`; defaults to the configured extent.
        #[arg(long, value_name = "TxHxW")]
        input: Option<String>,
        /// Also print the per-layer breakdown.
        #[arg(long)]
        layers: bool,
    },
    /// Line plot of a CSV file with a header row.
    Plot {
        #[arg(long, value_name = "FILE")]
        csv: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Column for the horizontal axis; defaults to the first.
        #[arg(long)]
        x: Option<String>,
        /// Column for the vertical axis; defaults to the second.
        #[arg(long)]
        y: Option<String>,
    },
}

/// Execute one parsed command.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { cfg, out } => commands::synth(&cfg, &out),
        Command::Train { cfg, data, out, resume } => commands::train(&cfg, &data, &out, resume.as_deref()),
        Command::Eval { cfg, ckpt, data, out } => commands::eval(&cfg, &ckpt, &data, &out),
        Command::Gradcheck { full, seed } => commands::gradcheck(full, seed),
        Command::Scancheck { seed } => commands::scancheck(seed),
        Command::Profile { cfg, input, layers } => commands::profile(&cfg, input.as_deref(), layers),
        Command::Plot { csv, out, x, y } => commands::plot(&csv, &out, x.as_deref(), y.as_deref()),
    }
}

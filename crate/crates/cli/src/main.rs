//! `sshunet`: train, evaluate, profile, and demonstrate slice-shift
//! networks from the command line.
//!
//! Exit codes: 0 success, 2 configuration or argument error, 3 runtime
//! abort (non-finite training), 4 I/O or file-format error, 1 anything
//! else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sshunet_core::Error;

#[derive(Parser)]
#[command(name = "sshunet", version, about = "Slice-shift UNet toolkit")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Dotted config override, e.g. --set train.steps=500. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trains a network on the configured volumes; writes history.csv and
    /// a checkpoint.
    Train,
    /// Scores a checkpoint on the validation volumes; writes metrics.csv
    /// with per-case and aggregate Dice/NSD.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself instead of a model, as an
        /// oracle for the metric pipeline.
        #[arg(long)]
        gt_as_prediction: bool,
    },
    /// Writes per-layer parameter/FLOP tables and a cross-variant summary.
    Profile {
        /// Comma-separated variant names; all four when omitted.
        #[arg(long, value_delimiter = ',', value_name = "NAMES")]
        variants: Vec<String>,
        /// Cost-model input as batch x spatial extents.
        #[arg(long, default_value = "1x128x128x128", value_name = "NxXxYxZ")]
        input: String,
    },
    /// Trains one model per shift fraction and writes dice-vs-fraction
    /// rows.
    SweepShift {
        /// Comma-separated fractions like 0,1/8,1/4; a default ladder when
        /// omitted.
        #[arg(long, value_delimiter = ',', value_name = "FRACTIONS")]
        fractions: Vec<String>,
        /// Run the fractions on separate threads (rows are identical
        /// either way).
        #[arg(long)]
        parallel: bool,
    },
    /// Prints a table showing that a 3-tap convolution along the slice
    /// axis equals shift plus multiply-accumulate.
    ShiftDemo {
        #[arg(long, default_value_t = 16)]
        length: usize,
        /// Three comma-separated taps.
        #[arg(long, default_value = "0.25,0.5,0.25", value_name = "A,B,C")]
        weights: String,
        /// Extra random trials to fold into the verdict.
        #[arg(long, default_value_t = 0)]
        trials: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::TrainAbort { .. } | Error::NonFinite { .. } => 3,
        Error::Io(_) | Error::Format(_) | Error::Checkpoint(_) | Error::Unsupported(_) => 4,
        _ => 1,
    }
}

fn run(cli: &Cli) -> sshunet_core::Result<()> {
    let cfg = config::load(
        cli.config.as_deref(),
        &cli.sets,
        cli.seed,
        cli.out.as_deref(),
    )?;
    match &cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Eval { checkpoint, gt_as_prediction } => {
            commands::cmd_eval(&cfg, checkpoint.as_deref(), *gt_as_prediction)
        }
        Command::Profile { variants, input } => commands::cmd_profile(&cfg, variants, input),
        Command::SweepShift { fractions, parallel } => {
            commands::cmd_sweep_shift(&cfg, fractions, *parallel)
        }
        Command::ShiftDemo { length, weights, trials } => {
            commands::cmd_shift_demo(&cfg, *length, weights, *trials)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

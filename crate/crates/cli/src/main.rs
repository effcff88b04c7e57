//! `harpeft`: synthetic corpus generation, MAE pretraining, fine-tuning,
//! leave-one-dataset-out runs, sweeps and reports.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use harpeft_core::finetune::Strategy;
use harpeft_core::Error;

use config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "harpeft", version, about = "Parameter-efficient fine-tuning of an MAE-pretrained sensor transformer")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every other seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Falls back to $HARPEFT_OUT_DIR, then ./harpeft-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Corpus manifest (TOML) listing domain CSV files.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct LoraArgs {
    /// LoRA rank.
    #[arg(long)]
    rank: Option<usize>,
    /// LoRA scaling numerator.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-domain corpus and its manifest.
    Generate {
        /// Synthetic corpus specification (TOML).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        domains: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
    },
    /// MAE-pretrain a backbone on every domain except the held-out one.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        held_out: String,
    },
    /// Fine-tune a pretrained backbone on one target domain.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        target: String,
        #[arg(long)]
        strategy: Strategy,
        #[command(flatten)]
        lora: LoraArgs,
        /// Fraction of target windows used for training.
        #[arg(long, default_value_t = 0.7)]
        split: f64,
    },
    /// Full leave-one-dataset-out evaluation.
    Lodo {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = Strategy::ALL)]
        strategies: Vec<Strategy>,
        #[command(flatten)]
        lora: LoraArgs,
        /// Folds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// LoRA rank sweep on one target.
    SweepRank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        target: String,
        #[arg(long, value_delimiter = ',', default_values_t = harpeft_core::eval::DEFAULT_RANKS)]
        ranks: Vec<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train fraction sweep on one target.
    SweepSplit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        target: String,
        #[arg(long, value_delimiter = ',', default_values_t = harpeft_core::eval::DEFAULT_SPLITS)]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [Strategy::Full, Strategy::Lora, Strategy::Qlora])]
        strategies: Vec<Strategy>,
        #[command(flatten)]
        lora: LoraArgs,
    },
    /// Render tables from saved run records.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownDomain { .. } | Error::StrategyMismatch { .. } | Error::Toml(_) => {
                Failure::usage(e.to_string())
            }
            _ => Failure::runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.to_string())
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
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

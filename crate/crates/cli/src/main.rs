//! `fate`: generate synthetic ego-network data, train, evaluate, explain and
//! benchmark. Exit status is 0 on success, 2 for a missing or invalid
//! configuration, 1 for any other failure.

mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "fate", version, about = "Explainable engagement prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Skip PNG heatmaps; CSV files are still written.
    #[arg(long, global = true)]
    pub no_plots: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/test datasets and the planted ground truth.
    Gen,
    /// Train a model on `<data>/train.jsonl`.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Score a checkpoint, or a predictions CSV, against a dataset split.
    Eval {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// CSV with `user_id,prediction` rows instead of a checkpoint.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Export local and global importance as JSON, CSV and heatmaps.
    Explain {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Users that get individual CSV and heatmap files.
        #[arg(long, default_value_t = 10)]
        users: usize,
    },
    /// Parameter, multiplication and timing comparison of the wirings.
    Bench {
        /// Skip wall-clock timing.
        #[arg(long)]
        analytic: bool,
        /// Also time with the thread pool enabled.
        #[arg(long)]
        parallel: bool,
    },
}

pub enum Failure {
    Config(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<fate_core::FateError>() {
            Some(fate_core::FateError::Config(m)) => Failure::Config(m.clone()),
            _ => Failure::Run(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen => commands::gen(&cli.common),
        Command::Train { data } => commands::train(&cli.common, &data),
        Command::Eval {
            data,
            split,
            checkpoint,
            predictions,
        } => commands::eval(&cli.common, &data, &split, checkpoint.as_deref(), predictions.as_deref()),
        Command::Explain {
            data,
            split,
            checkpoint,
            users,
        } => commands::explain(&cli.common, &data, &split, &checkpoint, users),
        Command::Bench { analytic, parallel } => commands::bench(&cli.common, analytic, parallel),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("fate: configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("fate: error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::Format;

#[derive(Parser)]
#[command(name = "bioserc", version, about = "Speaker-aware emotion recognition in conversation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dialogue, utterance and speaker counts per dataset file.
    Stats {
        /// One dataset per file; splits come from each conversation's `split` field.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Dataset names, in file order (default: file stem).
        #[arg(long = "name")]
        names: Vec<String>,
        #[arg(long, value_enum, default_value = "tsv")]
        format: Format,
    },
    /// Generate and cache speaker biographies for every split.
    ExtractBios {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the configured variant over its hyperparameter grid.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score the selected runs and write the evaluation report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report of a baseline configuration for the significance test.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Write per-utterance predictions as JSONL.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Seed of the selected run (default: first).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Stats { files, names, format } => commands::stats(&files, &names, format),
        Command::ExtractBios { config } => commands::extract_bios(&config::load(&config)?),
        Command::Train { config } => commands::train_cmd(&config::load(&config)?),
        Command::Evaluate { config, split, baseline } => {
            commands::evaluate_cmd(&config::load(&config)?, &split, baseline.as_deref())
        }
        Command::Predict { config, split, seed, out } => {
            commands::predict_cmd(&config::load(&config)?, &split, seed, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            let out = out.trim_end();
            if !out.is_empty() {
                println!("{out}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

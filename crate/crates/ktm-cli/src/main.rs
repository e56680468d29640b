//! `ktm`: K-token-merging toolkit. Subcommands cover dataset generation,
//! training, evaluation, generation, and Pareto reporting.
//!
//! Exit codes: 0 success, 2 configuration error, 3 diverged/stalled training,
//! 4 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ktm_cli::commands;

#[derive(Parser)]
#[command(name = "ktm", version, about = "K-token merging: train and evaluate compressed-prompt language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSONL tree-classification dataset
    GenData {
        /// TOML run configuration (defaults apply when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSONL path
        #[arg(long)]
        out: PathBuf,
        /// Override [data].n_samples
        #[arg(long)]
        samples: Option<usize>,
        /// Override [data].n_nodes
        #[arg(long)]
        n_nodes: Option<usize>,
        /// Override [data].seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model over the configured seeds and curriculum
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for checkpoints, logs, and the summary
        #[arg(long)]
        out_dir: PathBuf,
        /// Resume a single interrupted run from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override [train].seeds with a single seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override [train].max_epochs_per_stage
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on held-out trees
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Expected merge factor; mismatch with the checkpoint is an error
        #[arg(long)]
        k: Option<usize>,
        /// Override evaluation sample count
        #[arg(long)]
        samples: Option<usize>,
        /// Write the report as JSON here (always printed to stdout)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print as a CSV row instead of JSON
        #[arg(long)]
        csv: bool,
    },
    /// Generate a completion for a prompt
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
        /// Sample with this temperature instead of greedy decoding
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write a JSON trace of slots and emitted token ids
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Combine evaluation reports (and optional static baselines) into a
    /// Pareto table
    Report {
        /// EvalReport JSON files
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// CSV of baseline rows: method,performance,length_reduction
        #[arg(long)]
        baselines: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, samples, n_nodes, seed } => {
            commands::gen_data(config.as_deref(), &out, samples, n_nodes, seed)
        }
        Command::Train { config, out_dir, resume, seed, epochs } => {
            commands::train(config.as_deref(), &out_dir, resume.as_deref(), seed, epochs)
        }
        Command::Eval { checkpoint, k, samples, out, csv } => {
            commands::eval(&checkpoint, k, samples, out.as_deref(), csv)
        }
        Command::Generate { checkpoint, prompt, max_new_tokens, temperature, seed, trace } => {
            commands::generate(&checkpoint, &prompt, max_new_tokens, temperature, seed, trace.as_deref())
        }
        Command::Report { input, baselines } => commands::report(&input, baselines.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

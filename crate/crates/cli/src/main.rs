//!`hmdc` — condense a dataset into a small synthetic set, evaluate stored
//! artifacts, and export gradient-magnitude traces.

use clap::{Parser, Subcommand};
use hmdc_core::commands::{
    cmd_condense, cmd_evaluate, cmd_trace, error_line, CondenseArgs, EvaluateArgs, TraceArgs,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hmdc", version, about = "Heterogeneous-model dataset condensation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a condensation from a JSON config and write the artifact.
    Condense {
        /// Path to the JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for artifact, metrics, and run manifest.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train fresh models on a stored artifact and report test accuracy.
    Evaluate {
        /// Artifact directory produced by `condense`.
        #[arg(long)]
        artifact: PathBuf,
        /// Architecture to evaluate: convnet | tinyvit.
        #[arg(long)]
        model: String,
        /// Training epochs (default 300).
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated evaluation seeds (default 0,1,2).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Export a metrics stream as plot-ready CSV.
    Trace {
        /// Path to metrics.jsonl.
        #[arg(long)]
        metrics: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Condense { config, out, seed } => cmd_condense(&CondenseArgs {
            config_path: config,
            out_dir: out,
            seed,
        }),
        Command::Evaluate {
            artifact,
            model,
            epochs,
            seeds,
        } => cmd_evaluate(&EvaluateArgs {
            artifact_dir: artifact,
            model,
            epochs,
            seeds,
        })
        .map(|_| ()),
        Command::Trace { metrics, out } => cmd_trace(&TraceArgs {
            metrics_path: metrics,
            out_path: out,
        })
        .map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}

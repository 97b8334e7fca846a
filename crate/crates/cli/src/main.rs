//! `sdie`: command-line surface over the two-stage classifier.
//!
//! Exit status: 0 success, 1 usage error, 2 data or validation error,
//! 3 internal error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdie_core::corpus::InputFormat;

#[derive(Debug, Parser)]
#[command(name = "sdie", version, about = "Shutdown initiating event classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a pipeline config.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Pipeline config (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pattern vocabulary (JSON); built-in when absent.
    #[arg(long)]
    pub vocabulary: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct Input {
    /// Corpus file (JSONL or CSV).
    #[arg(long)]
    pub input: PathBuf,
    /// Input format; inferred from the extension when absent.
    #[arg(long)]
    pub format: Option<InputFormat>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus and rewrite it as canonical JSONL.
    Ingest {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        /// Where to write malformed-row reports.
        #[arg(long)]
        errors: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write both cleaning levels for each event.
    Clean {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write pattern count vectors for each event.
    Vectorize {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Mean pattern counts over SDIE and non-SDIE events.
    PatternsStats {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the prescreen on every labeled event of the input.
    TrainPrescreen {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Apply a trained prescreen.
    Prescreen {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the four-class model on the input's stage-two labels.
    TrainStage2 {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Classify events with a trained stage-two model.
    Classify {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// k-fold cross-validation of the stage-two model on the input.
    Crossval {
        #[command(flatten)]
        input: Input,
        /// Text report; a JSON report is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare predictions with ground truth, joined on id.
    Evaluate {
        /// JSONL with `id` and `label` (or `class`).
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Map raw truth labels to the four stage-two classes first.
        #[arg(long)]
        stage2: bool,
        /// Report file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic labeled corpus.
    Synth {
        /// Generator spec (JSON).
        #[arg(long, required_unless_present = "preset")]
        spec: Option<PathBuf>,
        /// Built-in spec: `prescreen` (10,000 events, 2% SDIE) or `stage2` (507 events).
        #[arg(long, conflicts_with = "spec", value_parser = ["prescreen", "stage2"])]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        vocabulary: Option<PathBuf>,
    },
    /// Full pipeline run.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Start the review service.
    Serve {
        /// Service config (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bind: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

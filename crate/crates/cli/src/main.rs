//! `openvocab`: data generation, training, vocabulary expansion, inference,
//! evaluation, calibration, the labeling pipeline and gradient checks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "openvocab", version, about = "Open-vocabulary multi-label video classification")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat JSON config of dotted keys; unset keys keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed for initialization, batching and sampling.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Extra config override, `key=value` with a JSON value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic dataset (manifest, vocabulary, description).
    GenData,
    /// Train a model and write checkpoints, the metrics log and a label database.
    Train {
        /// Dataset directory from `gen-data`; synthesized from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Add label embeddings to a vocabulary database.
    ExpandVocab {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Database to extend; a new one is started otherwise.
        #[arg(long)]
        db: Option<PathBuf>,
        /// Text file with one label per line.
        #[arg(long, conflicts_with = "split")]
        labels: Option<PathBuf>,
        /// Add the vocabulary of a dataset split.
        #[arg(long, required_unless_present = "labels")]
        split: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score one video against every label in a database.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Decision threshold on the score; falls back to `eval.threshold`.
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
        /// Ranked labels to print.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// AUPR, Peak F1 and F1 curves from score files or a checkpoint.
    Eval {
        /// Scored-pair JSONL files, one dataset each.
        #[arg(long, num_args = 1.., conflicts_with_all = ["checkpoint", "db"])]
        scores: Vec<PathBuf>,
        #[arg(long, requires = "db")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        db: Option<PathBuf>,
        /// Splits to score with the checkpoint.
        #[arg(long, num_args = 1.., default_value = "test_closed")]
        split: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Global threshold to mark and report F1 at.
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
    },
    /// Max-min threshold over validation score files.
    Calibrate {
        #[arg(long, num_args = 1.., required = true)]
        val: Vec<PathBuf>,
        /// Held-out score files to report F1 on at the chosen threshold.
        #[arg(long, num_args = 1..)]
        apply: Vec<PathBuf>,
    },
    /// One stage of the automatic labeling pipeline.
    Pipeline {
        #[arg(value_enum)]
        stage: Stage,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory holding the previous stage's files; defaults to `--out`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// F1-vs-threshold curves from score files.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f64>,
    },
    /// Finite-difference gradient checks of every trainable component.
    Gradcheck,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Captions,
    Extract,
    Dedup,
    Assign,
    Merge,
    All,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Train { .. } => "train",
            Self::ExpandVocab { .. } => "expand-vocab",
            Self::Infer { .. } => "infer",
            Self::Eval { .. } => "eval",
            Self::Calibrate { .. } => "calibrate",
            Self::Pipeline { .. } => "pipeline",
            Self::Plot { .. } => "plot",
            Self::Gradcheck => "gradcheck",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

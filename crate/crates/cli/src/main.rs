//! `tscan`: synthetic cohorts, task datasets, training, evaluation,
//! ablation and attention reports from one binary.

mod commands;
mod output;

use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use tscan::model::{Fusion, Task};
use tscan::pipeline::Split;

#[derive(Debug, Parser)]
#[command(
    name = "tscan",
    version,
    about = "TSCAN experiments on ICU time series"
)]
struct Cli {
    /// Root for default input and output locations.
    #[arg(long, global = true, env = "TSCAN_DATA_DIR", value_name = "DIR")]
    data_root: Option<PathBuf>,

    /// Maximum number of worker threads.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<NonZeroUsize>,

    /// Log more on stderr (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort (stays, events, phenotype labels).
    Synth(SynthArgs),
    /// Build a task dataset from stay and event tables.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Score a checkpoint on one split and print the result as JSON.
    Eval(EvalArgs),
    /// Train every fusion configuration and tabulate the results.
    Ablate(AblateArgs),
    /// Aggregate attention maps into temporal and indicator weights.
    Explain(ExplainArgs),
    /// Fit the logistic-regression baseline.
    Baseline(BaselineArgs),
    /// Put several evaluation results side by side.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    patients: u32,
    /// Output directory [default: <data-root>/raw].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Fraction of stays of patients aged 18 or younger.
    #[arg(long, default_value_t = 0.0)]
    minor_rate: f64,
    /// Fraction of patients with a second ICU stay.
    #[arg(long, default_value_t = 0.0)]
    second_stay_rate: f64,
    /// Fraction of stays with ward transfers.
    #[arg(long, default_value_t = 0.0)]
    transfer_rate: f64,
    /// Fraction of events without an admission id.
    #[arg(long, default_value_t = 0.0)]
    missing_hadm_rate: f64,
    /// Fraction of events without an ICU stay id.
    #[arg(long, default_value_t = 0.0)]
    missing_icustay_rate: f64,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    task: Task,
    /// Variable dictionary JSON [default: <in>/dictionary.json, else the built-in 24 variables].
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Directory with stays.csv, events.csv and optionally phenotypes.csv [default: <data-root>/raw].
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output directory [default: <data-root>/prepared].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Window length in hours [default: 48 for ihm, 320 otherwise].
    #[arg(long)]
    t: Option<usize>,
    /// Prediction clock spacing for los and decomp [default: 12 for los, 1 otherwise].
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    force: bool,
}

/// Overrides applied on top of the experiment file or the defaults.
#[derive(Clone, Debug, Default, Args)]
struct Hyper {
    /// Number of time chunks (must divide t) [default: 4].
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Positive-class loss weight for binary tasks [default: negatives / positives].
    #[arg(long)]
    class_weight: Option<f64>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment JSON (paths, task, split seed, model and training config).
    #[arg(long)]
    experiment: Option<PathBuf>,
    /// Prepared dataset [default: from the experiment, else <data-root>/prepared].
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    fusion: Option<Fusion>,
    /// Output directory [default: from the experiment, else <data-root>/runs/train].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint path [default: <data-root>/runs/train/model.ckpt].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prepared dataset [default: <data-root>/prepared].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Bootstrap resamples for 95% intervals; 0 disables them.
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    bootstrap_seed: u64,
    /// Output directory [default: eval-<split> next to the checkpoint].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Fusion configurations to train, comma separated [default: all six].
    #[arg(long, value_delimiter = ',')]
    fusions: Vec<Fusion>,
    /// Output directory [default: <data-root>/runs/ablate].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    /// Checkpoint path [default: <data-root>/runs/train/model.ckpt].
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prepared dataset [default: <data-root>/prepared].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Use at most this many samples of the split, in index order.
    #[arg(long)]
    max_samples: Option<usize>,
    /// Output directory [default: <data-root>/runs/explain].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    /// Prepared dataset [default: <data-root>/prepared].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split the fitted model is scored on.
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    /// Output directory [default: <data-root>/runs/baseline].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Evaluation JSON files, optionally as NAME=PATH.
    #[arg(required = true, num_args = 1..)]
    runs: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.get())
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

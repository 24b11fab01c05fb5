use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Exit status and message of a failed command.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const NON_FINITE: u8 = 4;
    pub const CHECKSUM: u8 = 5;
    pub const MISSING_DUMP: u8 = 6;

    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: Self::USAGE, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError { code: Self::IO, message: message.into() }
    }
}

impl From<rcnn::Error> for CliError {
    fn from(e: rcnn::Error) -> Self {
        use rcnn::Error as E;
        let code = match &e {
            E::Invalid(_) => Self::USAGE,
            E::Io(_) | E::Format { .. } => Self::IO,
            E::NonFiniteLoss { .. } | E::NonFinite(_) => Self::NON_FINITE,
            E::ChecksumMismatch(..) => Self::CHECKSUM,
            E::MissingDump(_) => Self::MISSING_DUMP,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rcnn", version, about = "Recurrent convolutional networks on occluded stereo digit scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an occluded scene dataset from MNIST IDX files.
    Generate(GenerateArgs),
    /// Train one model preset on a generated dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split and write its correctness vector.
    Eval(EvalArgs),
    /// Pairwise McNemar tests with FDR control over several evaluations.
    Compare(CompareArgs),
    /// Corrected and reverted guesses over time steps, with exemplar traces.
    Timecourse(TimecourseArgs),
    /// Print the trainable parameter count of every preset.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// TOML file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding the four standard MNIST IDX files.
    #[arg(long, env = "RCNN_MNIST_DIR")]
    pub mnist_dir: Option<PathBuf>,
    /// Use N seven-segment glyphs per class instead of MNIST.
    #[arg(long, value_name = "N")]
    pub synthetic_per_class: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generation seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scenes per base digit [default: 10].
    #[arg(long)]
    pub samples_per_base: Option<usize>,
    /// Only use the first N base digits of each split.
    #[arg(long, value_name = "N")]
    pub limit_bases: Option<usize>,
    /// Disparity of the far occluder in pixels [default: 2].
    #[arg(long)]
    pub disparity_far: Option<u32>,
    /// Disparity of the near occluder in pixels [default: 4].
    #[arg(long)]
    pub disparity_near: Option<u32>,
    /// Records per shard file [default: 50000].
    #[arg(long)]
    pub shard_records: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory for checkpoints and metrics.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Preset: B, B-F, B-K, BT, BL or BLT [default: BLT].
    #[arg(long)]
    pub model: Option<String>,
    /// Feed the left view only (1 channel).
    #[arg(long, conflicts_with = "stereo")]
    pub mono: bool,
    /// Feed both views as 2 channels [default].
    #[arg(long)]
    pub stereo: bool,
    /// Base filter count; B-F doubles it [default: 32].
    #[arg(long)]
    pub filters: Option<usize>,
    /// Unrolled time steps [default: 4].
    #[arg(long)]
    pub tau: Option<usize>,
    /// Training epochs [default: 25].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 500].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.003].
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Adam first-moment decay [default: 0.9].
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam second-moment decay [default: 0.999].
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8].
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Seed for initialisation and shuffling [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trailing fraction of records held out [default: 0.02].
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    /// Only load the first N training records.
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// TOML file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the correctness vector and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model name used in comparison tables [default: preset and input mode].
    #[arg(long)]
    pub name: Option<String>,
    /// Dataset split to score: train or test [default: test].
    #[arg(long)]
    pub split: Option<String>,
    /// Inference batch size [default: 500].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Only score the first N records.
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    /// Also write per-step softmax outputs for `timecourse`.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// TOML file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation directories written by `eval`.
    pub evals: Vec<PathBuf>,
    /// Directory for compare.csv and compare.json; CSV goes to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// False discovery rate for Benjamini-Hochberg [default: 0.05].
    #[arg(long)]
    pub fdr: Option<f64>,
    /// Use the exact binomial test when fewer than 25 samples are discordant.
    #[arg(long)]
    pub exact_small: bool,
}

#[derive(Args, Debug)]
pub struct TimecourseArgs {
    /// TOML file with settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation directory written by `eval --dump`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Directory for exemplars.csv and timecourse.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of exemplar traces to export [default: 10].
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Base filter count.
    #[arg(long, default_value_t = 32)]
    pub filters: usize,
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("RCNN_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::usage(format!("RCNN_THREADS={v} is not a count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Compare(a) => commands::compare(a),
        Command::Timecourse(a) => commands::timecourse(a),
        Command::Params(a) => commands::params(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

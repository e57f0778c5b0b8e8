//! `geoflow` command-line tool.
//!
//! Exit codes: 0 success, 1 I/O or parse error, 2 domain precondition
//! violation, 3 numeric divergence.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use geoflow::actionpipe::NormScheme;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Domain(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "geoflow", version, about = "Flow matching on S3, 3D tokens and scene annotation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit an equal-mass 3D token vocabulary to a file of values.
    FitTokenizer(FitTokenizerArgs),
    /// Generate a VQA corpus from scene directories.
    GenVqa(GenVqaArgs),
    /// Resample, chunk and normalize trajectories.
    Pipeline(PipelineArgs),
    /// Train the toy denoiser from a JSON config.
    TrainToy(TrainToyArgs),
    /// Train every config of a grid under several seeds.
    Ablate(AblateArgs),
    /// Merge the results of train-toy and ablate runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct FitTokenizerArgs {
    /// Whitespace-separated numbers, or an f64 tensor blob.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = geoflow::tokenizer3d::DEFAULT_BINS)]
    pub n_bins: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenVqaArgs {
    /// Scene directory; repeat for several scenes.
    #[arg(long = "scene", required = true)]
    pub scenes: Vec<PathBuf>,
    /// Vocabulary JSON, or a fit-tokenizer output directory.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Trajectory JSONL (one pose per line) or an [N, 9] tensor blob; repeatable.
    #[arg(long = "traj", required = true)]
    pub trajs: Vec<PathBuf>,
    #[arg(long, default_value_t = geoflow::actionpipe::DEFAULT_HZ)]
    pub dst_hz: f64,
    #[arg(long, default_value_t = 5)]
    pub horizon: usize,
    /// quantile, minmax_const or mean_std.
    #[arg(long, default_value = "quantile")]
    pub scheme: NormScheme,
    /// Anchor stride; defaults to the horizon (non-overlapping chunks).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Denormalize every chunk, re-apply it and report the worst error.
    #[arg(long)]
    pub verify: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// JSON array of training configs.
    #[arg(long)]
    pub grid: PathBuf,
    /// First seed; runs use `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub n_seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories produced by train-toy or ablate.
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::FitTokenizer(a) => commands::fit_tokenizer(a),
        Command::GenVqa(a) => commands::gen_vqa(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Report(a) => commands::report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

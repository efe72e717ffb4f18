//! File-based workflows around `dig_core`: dataset generation, offline
//! scoring of model answers, curriculum training and greedy evaluation.
//!
//! Every command writes only below its `--out` directory and finishes by
//! atomically writing `manifest.json`, so a manifest implies a complete run.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use dig_core::curriculum::{CurriculumError, Split};
use dig_core::grpo::GrpoError;

pub mod config;
pub mod eval;
pub mod generate;
pub mod io;
pub mod manifest;
pub mod score;
pub mod train;

pub use config::RunConfig;
pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("{} prediction(s) name pairs missing from the annotations: {}", .0.len(), .0.join(", "))]
    MissingPair(Vec<String>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("csv {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Grpo(GrpoError::NonFiniteLoss)
            | CliError::Curriculum(CurriculumError::Grpo(GrpoError::NonFiniteLoss)) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "dig",
    version,
    about = "Differential grounding: data, rewards, training"
)]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render paired scenes with ground-truth difference boxes.
    Generate(GenerateArgs),
    /// Score model answers against annotations.
    Score(ScoreArgs),
    /// Train the toy policy through the curriculum.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint on a generated dataset directory.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the configuration).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct RewardArgs {
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub min_iou: Option<f64>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct GrpoArgs {
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Only generate this stage.
    #[arg(long)]
    pub stage: Option<String>,
    /// Pairs per generated stage (overrides the configuration).
    #[arg(long)]
    pub n: Option<usize>,
    /// Which split of each stage to write.
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// JSON lines of `{"pair_id": ..., "text": ...}`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// `annotations.jsonl` written by `generate`.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub reward: RewardArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written at a stage boundary.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub reward: RewardArgs,
    #[command(flatten)]
    pub grpo: GrpoArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A stage directory produced by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub reward: RewardArgs,
}

/// Runs a parsed command, printing its summary to standard output.
pub fn run(cli: Cli) -> Result<()> {
    let command = cli.command;
    let go = move || match command {
        Command::Generate(a) => generate::cmd_generate(&a).map(|_| ()),
        Command::Score(a) => score::cmd_score(&a).map(|_| ()),
        Command::Train(a) => train::cmd_train(&a).map(|_| ()),
        Command::Eval(a) => eval::cmd_eval(&a).map(|_| ()),
    };
    match cli.jobs {
        Some(0) => Err(CliError::Usage("--jobs must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(go),
        None => go(),
    }
}

/// Parses arguments, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

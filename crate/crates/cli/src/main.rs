mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use etf_debias::Error;

/// Debiased training with simplex-ETF prime features.
#[derive(Parser, Debug)]
#[command(name = "etfdebias", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a biased dataset (ETFD) plus a JSON sidecar.
    Gen(GenArgs),
    /// Train a model; writes checkpoint.etfc, log.csv and manifest.json.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Neural-Collapse metrics of a feature dump.
    Metrics(MetricsArgs),
    /// Check frame geometry or the gradient decomposition.
    Verify(VerifyArgs),
    /// Gradient decomposition report; same as `verify --what grad`.
    Gradcheck(GradArgs),
    /// Dump learnable features of a dataset under a checkpoint (ETFF).
    Features(FeaturesArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    TwoSignal,
    ColoredMnist,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Number of classes (and bias attributes).
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Fraction of bias-conflicting samples in the train split.
    #[arg(long, default_value_t = 0.01)]
    ratio: f64,
    /// Samples per class (two-signal only).
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, default_value_t = 1.0)]
    mu_core: f64,
    #[arg(long, default_value_t = 3.0)]
    mu_bias: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 20)]
    noise_dim: usize,
    #[arg(long)]
    mnist_images: Option<PathBuf>,
    #[arg(long)]
    mnist_labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    nc_every: Option<usize>,
    /// Compute NC metrics on test features.
    #[arg(long)]
    nc_on_test: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "null")]
    prime_policy: String,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SubsetArg {
    All,
    Aligned,
    Conflicting,
    Every,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    features: PathBuf,
    /// Checkpoint supplying the W block and bias; without it NC2-NC4 are null.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "every")]
    subset: SubsetArg,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum What {
    Etf,
    Grad,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    what: What,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Samples drawn for the gradient check.
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::Shape(_)
            | Error::Index { .. }
            | Error::EmptyClass(_)
            | Error::DegenerateDraw { .. } => EXIT_USAGE,
            Error::NonFinite { .. } | Error::NoConvergence { .. } => EXIT_NUMERIC,
            Error::Parse { .. }
            | Error::Format(_)
            | Error::Checksum { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => EXIT_IO,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Verify(a) => commands::verify(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Features(a) => commands::features(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("etfdebias: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! `csr`: synthetic data generation, training, inference, evaluation and
//! gradient certification for constrained intrinsic image decomposition.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or data error.
//! Set `CSR_THREADS` to bound the worker pool; results do not depend on it.

mod commands;
mod config;
mod dataset;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "csr", version, about = "Intrinsic image decomposition with learned constraint slack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a train/test scene split.
    GenData(GenDataArgs),
    /// Train a network on the train split of a dataset.
    Train(TrainArgs),
    /// Decompose one image with a trained network.
    Infer(InferArgs),
    /// Score checkpoints (or a full ablation) on the test split.
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `data.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub specular_fraction: Option<f64>,
    #[arg(long)]
    pub specular_strength: Option<f64>,
    /// Skip PNG previews.
    #[arg(long)]
    pub no_png: bool,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    /// `l2` or `distributional`.
    #[arg(long)]
    pub loss: Option<String>,
    /// `gaussian` or `laplace`.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Seed for weight initialization and batch sampling.
    #[arg(long)]
    pub train_seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `truth` or `prediction`.
    #[arg(long)]
    pub constraint_target: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides `data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write (overrides `train.checkpoint`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Linear image: a `.csrf` raw map, or an 8-bit image (gamma 2.2 is undone).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `none`, `hard` or `soft_learned`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub sweeps: Option<usize>,
    #[arg(long)]
    pub no_png: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoints to score; repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Inference modes per checkpoint, comma separated (default: all valid ones).
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
    /// Train and score the five ablation configurations.
    #[arg(long)]
    pub ablation: bool,
    /// Add a row scoring the ground truth against itself.
    #[arg(long)]
    pub truth: bool,
    /// Text report path; a `.csv` twin is written alongside.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub lmse_window: Option<usize>,
    #[arg(long)]
    pub lmse_stride: Option<usize>,
    #[arg(long)]
    pub sweeps: Option<usize>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random micro-instances per suite.
    #[arg(long, default_value_t = csr_core::gradcheck::DEFAULT_INSTANCES)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: negate every analytic gradient so the check must fail.
    #[arg(long)]
    pub inject_sign_flip: bool,
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("CSR_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("CSR_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(CliError::usage)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

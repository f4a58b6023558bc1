//! `trust`: dataset generation, bound verification, classical solvers,
//! training, evaluation and reporting as reproducible runs.
//!
//! Exit codes: 0 success, 1 verification or computation failure, 2 usage or
//! configuration error.

mod commands;
mod config;
mod error;
mod record;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;
use record::Recorder;

#[derive(Parser)]
#[command(
    name = "trust",
    version,
    about = "Sparse recovery toolkit: TRUST reconstructor, classical solvers, RIP bound lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic observation/target dataset.
    GenData(GenDataArgs),
    /// Sweep token inner-product deviations against RIP constants.
    VerifyBound(VerifyBoundArgs),
    /// Reconstruct a dataset split with OMP, ISTA or FISTA.
    Solve(SolveArgs),
    /// Train a TRUST or U-Net reconstructor.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Tabulate the summaries of several runs.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON dataset spec; flags override its fields.
    #[arg(long, visible_alias = "manifest")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// gaussian_square | identity | orthonormal | gaussian_fat | fourier
    #[arg(long)]
    pub operator: Option<String>,
    /// Measurement count for gaussian_fat.
    #[arg(long)]
    pub m: Option<usize>,
    /// Kept frequency fraction for fourier.
    #[arg(long)]
    pub keep: Option<f64>,
    #[arg(long)]
    pub operator_seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Blob count range `lo:hi`.
    #[arg(long)]
    pub blobs: Option<String>,
}

#[derive(Args)]
pub struct VerifyBoundArgs {
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cells `m:n:k[,m:n:k...]`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Comma-separated operator kinds.
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub column_normalized: bool,
    #[arg(long)]
    pub monte_carlo_budget: Option<u64>,
    /// Also write a gnuplot data file.
    #[arg(long)]
    pub gnuplot: Option<PathBuf>,
}

#[derive(Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// omp | ista | fista
    #[arg(long)]
    pub method: Option<String>,
    /// known | estimated
    #[arg(long)]
    pub operator: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    /// Solve only the first N images of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// OMP atom budget; defaults to the number of measurements.
    #[arg(long)]
    pub sparsity: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Ridge for operator estimation.
    #[arg(long)]
    pub ridge: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// trust | unet
    #[arg(long)]
    pub model: Option<String>,
    /// l2 | l2l1 | l2ssim
    #[arg(long)]
    pub loss: Option<String>,
    /// all | none | a 0/1 string with one digit per skip connection
    #[arg(long)]
    pub skips: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds both parameter initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint manifest, e.g. `run/best.json`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write `(y, x, x̂)` PGM triplets for every evaluated image here.
    #[arg(long)]
    pub emit_images: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory whose subdirectories hold `summary.json` files.
    #[arg(long)]
    pub runs: PathBuf,
    /// Output directory; defaults to `--runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::VerifyBound(_) => "verify-bound",
            Command::Solve(_) => "solve",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
        }
    }
}

/// Worker threads from `TRUST_THREADS`; 0 (the default) is serial.
fn threads() -> Result<usize, CliError> {
    match std::env::var("TRUST_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("TRUST_THREADS must be a non-negative integer, got '{v}'"))),
        Err(_) => Ok(0),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut recorder = Recorder::new(cli.command.name());
    let result = threads().and_then(|t| commands::dispatch(cli.command, &mut recorder, t));
    if let Some(path) = recorder.finish(&result) {
        eprintln!("run record: {}", path.display());
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

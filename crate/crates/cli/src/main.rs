//! `plqlearn`: dictionary learning and sparse coding with piecewise
//! linear-quadratic penalties.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "plqlearn", version, about = "Sparse coding and dictionary learning with PLQ penalties")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a dictionary and codes for the columns of a matrix.
    Learn(LearnArgs),
    /// Sparse-code the columns of a matrix over a fixed dictionary.
    Code(CodeArgs),
    /// Robust image modeling under salt-and-pepper noise.
    ImageExperiment(ImageArgs),
    /// Tag refinement with mixed penalties on planted synthetic data.
    TagExperiment(TagArgs),
    /// Quantile l1-graph spectral clustering of a labeled table.
    ClusterSweep(ClusterArgs),
    /// Run the built-in oracles and print a PASS/FAIL table.
    Selftest,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Interior-point KKT tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub ip_tol: f64,
    /// Interior-point iteration budget.
    #[arg(long, default_value_t = 200)]
    pub ip_max_iter: usize,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// Directory for reports and the run manifest (created if absent).
    #[arg(long, default_value = "plqlearn-out")]
    pub out_dir: PathBuf,
    /// Master seed; component seeds are derived from it by name.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct LearnArgs {
    /// Data matrix as CSV, one sample per column.
    #[arg(long)]
    pub input: PathBuf,
    /// Skip one header line in CSV inputs.
    #[arg(long)]
    pub header: bool,
    #[arg(long)]
    pub atoms: usize,
    /// Misfit spec, e.g. `l2`, `huber:kappa=1`, `blocks:0-63=l2;64-99=l1`.
    #[arg(long, default_value = "l2")]
    pub misfit: String,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Moreau smoothing parameter; required for nonsmooth misfits.
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub rtol: f64,
    /// Write D, A and a JSON sidecar every N outer iterations (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Leave dictionary columns unconstrained instead of projecting onto
    /// the unit ball.
    #[arg(long)]
    pub no_normalize: bool,
    /// After learning with a smoothed misfit, re-solve the codes with the
    /// original one.
    #[arg(long)]
    pub resolve_unsmoothed: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct CodeArgs {
    /// Dictionary matrix as CSV, one atom per column.
    #[arg(long)]
    pub dictionary: PathBuf,
    /// Data matrix as CSV, one sample per column.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub header: bool,
    #[arg(long, default_value = "l2")]
    pub misfit: String,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Constrain codes to be nonnegative.
    #[arg(long)]
    pub nonneg: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ImageArgs {
    /// Grayscale image as PGM (P2/P5) or a CSV matrix of values in [0, 1].
    /// Without it a synthetic test image is used.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub header: bool,
    /// Side length of the synthetic test image.
    #[arg(long, default_value_t = 64)]
    pub synthetic_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15")]
    pub noise_levels: Vec<f64>,
    /// Misfit spec; repeat the flag for several.
    #[arg(long = "misfit", default_values = ["l2", "huber:kappa=0.05"])]
    pub misfits: Vec<String>,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, default_value_t = 128)]
    pub atoms: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct TagArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    pub flips: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    /// Weight of the tag block relative to the features.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Huber threshold on the tag block.
    #[arg(long, default_value_t = 0.3)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lambda: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone)]
pub struct ClusterArgs {
    /// Samples-by-features CSV with a class label column.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub header: bool,
    /// Zero-based label column (default: last).
    #[arg(long)]
    pub label_col: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    pub taus: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub kappa: f64,
    /// Sparsity weight (default 0.01 / sqrt(samples)).
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

fn configure_threads() -> anyhow::Result<usize> {
    match std::env::var("PLQ_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| anyhow::anyhow!("PLQ_THREADS must be a positive integer, got '{v}'"))?;
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
            Ok(n)
        }
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|threads| match cli.command {
        Command::Learn(a) => commands::learn(a, threads),
        Command::Code(a) => commands::code(a, threads),
        Command::ImageExperiment(a) => commands::image(a, threads),
        Command::TagExperiment(a) => commands::tags(a, threads),
        Command::ClusterSweep(a) => commands::cluster(a, threads),
        Command::Selftest => commands::selftest(),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

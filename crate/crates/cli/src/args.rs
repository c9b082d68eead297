use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use mplnet::simgen::{DropoutLevel, GraphKind, MixingLevel};
use mplnet::variational::PStepMode;

#[derive(Debug, Parser)]
#[command(name = "mplnet", version, about = "Population-specific sparse networks from count data")]
pub struct Cli {
    /// Worker threads (falls back to MPLNET_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log verbosity: error, warn, info, debug.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset bundle with ground truth.
    Simulate(SimulateArgs),
    /// Fit the penalized mixture model to a count matrix.
    Fit(FitArgs),
    /// Compare the mixture fit with K-means + graphical lasso on a bundle.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON simulation config; flags given on the command line override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<GraphKind>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of populations (equal proportions).
    #[arg(long)]
    pub populations: Option<usize>,
    #[arg(long)]
    pub dropout: Option<DropoutLevel>,
    #[arg(long)]
    pub mixing: Option<MixingLevel>,
    /// Fix the number of discriminative coordinates instead of calibrating.
    #[arg(long = "p-d")]
    pub p_d: Option<usize>,
    #[arg(long)]
    pub edge_magnitude: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Icl,
    Density(f64),
}

impl FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "icl" {
            return Ok(Selection::Icl);
        }
        if let Some(x) = s.strip_prefix("density:") {
            let d: f64 = x.parse().map_err(|_| format!("'{x}' is not a density"))?;
            if !(d > 0.0 && d <= 1.0) {
                return Err(format!("density {d} must lie in (0, 1]"));
            }
            return Ok(Selection::Density(d));
        }
        Err(format!("expected 'icl' or 'density:<x>', got '{s}'"))
    }
}

/// Solver settings shared by `fit` and `benchmark`.
#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long = "p-step", default_value = "paper")]
    pub p_step: PStepMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "max-iter", default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long = "tol-elbo", default_value_t = 1e-6)]
    pub tol_elbo: f64,
    #[arg(long = "tol-sign", default_value_t = 1e-4)]
    pub tol_sign: f64,
    /// ADMM step size.
    #[arg(long, default_value_t = 3.0)]
    pub rho: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Samples × features count matrix (TSV with header).
    #[arg(long)]
    pub counts: PathBuf,
    /// Two-column sample/scaling TSV; estimated from row totals when absent.
    #[arg(long)]
    pub scaling: Option<PathBuf>,
    #[arg(long = "G")]
    pub components: usize,
    #[arg(long, conflicts_with = "select")]
    pub lambda: Option<f64>,
    /// `icl` or `density:<x>`.
    #[arg(long)]
    pub select: Option<Selection>,
    /// Feature-name pairs whose partial correlation is fixed at zero.
    #[arg(long = "zero-edges")]
    pub zero_edges: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Components to fit; defaults to the number of true networks.
    #[arg(long = "G")]
    pub components: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
    /// Add a subsampling stability column.
    #[arg(long)]
    pub stability: bool,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.9)]
    pub frac: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out: PathBuf,
}

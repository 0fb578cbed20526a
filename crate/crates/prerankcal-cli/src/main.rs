//! Command-line runner: train, evaluate, nulltest, and tune.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or
//! metric error, 4 numeric failure.

mod commands;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "prerankcal",
    version,
    about = "Multivariate calibration training and diagnostics for mixture-density regressors"
)]
struct Cli {
    /// Worker threads (default: machine parallelism; env
    /// PRERANKCAL_THREADS as fallback). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataOpts {
    /// CSV file with x_* feature and y_* target columns.
    #[arg(long, conflicts_with = "synth")]
    data: Option<std::path::PathBuf>,

    /// Synthetic dataset as `kind:n`, e.g. `linear_gaussian:2000`
    /// (kinds: linear_gaussian, bimodal, hetero_corr, lowrank8).
    #[arg(long)]
    synth: Option<String>,

    /// Base seed for splits, sampling, and initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Which train/validation/test shuffle to use (1-5).
    #[arg(long, default_value_t = 1)]
    run_index: u32,

    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "out")]
    out: std::path::PathBuf,
}

#[derive(Args, Clone)]
struct RegOpts {
    /// Pre-rank token: marginal[:d], location, scale, dependency[:h],
    /// pca[:d], hdr, copula. Bare marginal/pca denote the averaged family.
    #[arg(long, default_value = "location")]
    prerank: String,

    /// Regularizer composition around the main pre-rank.
    #[arg(long, value_parser = ["plain", "marginal", "pca"], default_value = "plain")]
    compose: String,

    /// Regularization strength.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,

    /// Predictive samples per row (S).
    #[arg(long, default_value_t = 100)]
    samples: usize,

    /// Sigmoid temperature for smoothed CDFs.
    #[arg(long, default_value_t = 100.0)]
    tau: f64,

    /// Quantile grid size (M).
    #[arg(long, default_value_t = 100)]
    grid: usize,

    /// Penalty exponent (p >= 1).
    #[arg(long, default_value_t = 1.0)]
    exponent: f64,

    /// Explained-variance threshold for the PCA family.
    #[arg(long, default_value_t = 0.8)]
    pca_threshold: f64,
}

#[derive(Args, Clone)]
struct NetOpts {
    /// Mixture components (K).
    #[arg(long, default_value_t = 5)]
    components: usize,

    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "100,100,100")]
    hidden: String,
}

#[derive(Args, Clone)]
struct FitOpts {
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,

    #[arg(long, default_value_t = 256)]
    batch: usize,

    #[arg(long, default_value_t = 200)]
    epochs: usize,

    /// Early-stopping patience on the validation objective.
    #[arg(long, default_value_t = 20)]
    patience: usize,

    /// Training score: nll or energy.
    #[arg(long, value_parser = ["nll", "energy"], default_value = "nll")]
    score: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train a mixture-density network, optionally with calibration
    /// regularization.
    Train {
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        reg: RegOpts,
        #[command(flatten)]
        net: NetOpts,
        #[command(flatten)]
        fit: FitOpts,
    },
    /// Evaluate a checkpoint on the test split: PCE per pre-rank with
    /// significance, reliability curves, NLL, and energy score.
    Evaluate {
        #[command(flatten)]
        data: DataOpts,
        /// Trained checkpoint to evaluate.
        #[arg(long)]
        checkpoint: std::path::PathBuf,
        /// Pre-rank tokens to evaluate (comma separated).
        #[arg(long, default_value = "marginal,location,scale,dependency,pca,hdr,copula")]
        preranks: String,
        /// Null-distribution simulations for p-values.
        #[arg(long, default_value_t = 5000)]
        n_sims: usize,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 100.0)]
        tau: f64,
        #[arg(long, default_value_t = 100)]
        grid: usize,
        /// Dependency lag.
        #[arg(long, default_value_t = 1)]
        lag: usize,
    },
    /// Null-distribution significance test of observed PCEs.
    Nulltest {
        #[command(flatten)]
        data: DataOpts,
        /// CSV of pre-computed PITs with header `prerank,pit`.
        #[arg(long, conflicts_with_all = ["checkpoint"])]
        pit_file: Option<std::path::PathBuf>,
        /// Checkpoint to compute observed PCEs from.
        #[arg(long)]
        checkpoint: Option<std::path::PathBuf>,
        /// Simulated statistics per null distribution.
        #[arg(long, default_value_t = 50000)]
        n_sims: usize,
        /// Independent runs averaged into each observed statistic.
        #[arg(long, default_value_t = 1)]
        runs: u32,
        #[arg(long, default_value = "marginal,location,scale,dependency,pca,hdr,copula")]
        preranks: String,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 100.0)]
        tau: f64,
        #[arg(long, default_value_t = 100)]
        grid: usize,
        #[arg(long, default_value_t = 1)]
        lag: usize,
    },
    /// Sweep the regularization strength and select the best value
    /// within a 10% energy-score budget.
    Tune {
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        reg: RegOpts,
        #[command(flatten)]
        net: NetOpts,
        #[command(flatten)]
        fit: FitOpts,
        /// Candidate lambda values (must include 0).
        #[arg(long, default_value = "0,0.01,0.1,1,5,10")]
        grid_lambdas: String,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("PRERANKCAL_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = threads {
        // Ignore failure: the global pool may already exist under test.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let code = commands::dispatch(cli.command);
    std::process::exit(code);
}

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Normalize, fit, monitor and simulate training-loss curves.
#[derive(Debug, Parser)]
#[command(name = "collapsekit", version)]
pub struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "COLLAPSEKIT_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Trailing smoothing window: steps (`100`) or tokens (`12582912tok`).
    #[arg(long, global = true, default_value = "100")]
    pub smooth_window: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a loss log and re-export it.
    Ingest(IngestArgs),
    /// Map a loss log to collapse coordinates (CSV t_hat,ell).
    Normalize(NormalizeArgs),
    /// Residuals between two normalized curves (CSV t_hat,resid).
    Residuals(ResidualsArgs),
    /// Noisy quadratic model simulation against the closed form.
    Nqm(NqmArgs),
    /// Compute cost of shrinking the model at fixed loss.
    Compress(CompressArgs),
    /// Fit predictor power laws to a corpus.
    Fit(FitArgs),
    /// Evaluate a fitted predictor (CSV t_hat,ell_hat).
    Predict(PredictArgs),
    /// Pick a sweep winner from partial runs.
    Rank(RankArgs),
    /// Score stopping strategies on completed sweeps (CSV stop_frac,strategy,gap).
    Evalstop(EvalstopArgs),
    /// Watch a log against a reference curve (NDJSON events; exit 2 on alert).
    Monitor(MonitorArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// AdamW timescale of a run config.
    Tau(TauArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, default_value = "-")]
    pub out: String,
    #[arg(long, default_value = "csv")]
    pub out_format: String,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    /// final | early-align | estimate
    #[arg(long, default_value = "final")]
    pub method: String,
    /// Reference normalized curve (early-align).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Chinchilla fit JSON (estimate).
    #[arg(long)]
    pub scaling_fit: Option<PathBuf>,
    /// Loss offset subtracted before dividing (final).
    #[arg(long, default_value_t = 0.0)]
    pub offset: f64,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct ResidualsArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Rolling-MAE window in training fraction.
    #[arg(long, default_value_t = 0.02)]
    pub window: f64,
    #[arg(long, default_value = "-")]
    pub out: String,
    /// Where to write the JSON summary (default: stderr).
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NqmArgs {
    #[arg(long, default_value_t = 1.0)]
    pub h: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 0.0)]
    pub theta0: f64,
    #[arg(long)]
    pub tau: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    /// constant | d2z[:warmup] | linear:warmup:ratio | path.json
    #[arg(long, default_value = "constant")]
    pub schedule: String,
    #[arg(long, default_value_t = 1000)]
    pub seeds: usize,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long, default_value_t = 0.35)]
    pub a: f64,
    #[arg(long, conflicts_with = "sweep")]
    pub kn: Option<f64>,
    /// lo:hi:n
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Points per grid axis (default: the built-in 65/64/41 grids).
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub max_rounds: usize,
    #[arg(long, default_value_t = 0.05)]
    pub m: f64,
    #[arg(long, default_value_t = 0.001)]
    pub eps1: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eps2: f64,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub tau: f64,
    #[arg(long)]
    pub tpp: f64,
    #[arg(long, default_value = "d2z")]
    pub schedule: String,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, default_value = "predicted_best")]
    pub strategy: String,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct EvalstopArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fit: PathBuf,
    /// Comma-separated stop fractions.
    #[arg(long, default_value = "0.25,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub stops: String,
    /// Comma-separated strategies.
    #[arg(long, default_value = "random,current_best,predicted_best")]
    pub strategies: String,
    /// Draws averaged for the random strategy.
    #[arg(long, default_value_t = 100)]
    pub random_draws: u64,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Reference normalized curve (CSV t_hat,ell).
    #[arg(long, required_unless_present = "reference_manifest")]
    pub reference: Option<PathBuf>,
    /// Band manifest; the smallest completed run becomes the reference.
    #[arg(long, conflicts_with = "reference")]
    pub reference_manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub poll_ms: u64,
    /// Stop waiting for the run to finish after this long.
    #[arg(long)]
    pub timeout_ms: Option<u64>,
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TauArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated training fractions for instantaneous τ.
    #[arg(long)]
    pub at: Option<String>,
    #[arg(long, default_value = "-")]
    pub out: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! `varscale`: train, evaluate, sweep and gradient-check from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
//! 3 verification failure.

mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use varscale_core::config::Method;

#[derive(Parser)]
#[command(name = "varscale", version, about = "Prototypical networks with variational metric scaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoints and a run manifest.
    Train(TrainArgs),
    /// Meta-test one or more checkpoints.
    Eval(EvalArgs),
    /// Train over a grid of prior means and initial scalings.
    Sweep(SweepArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Config document (TOML).
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run the config recorded in a run manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: log.dir, else runs/<method>-seed<seed>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Config overrides as `--key=value` or `--key value`, with dotted keys
    /// for nested fields (`--scaling.mu_init=10`).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum WhichModel {
    /// The best-validation snapshot (the last one when validation never ran).
    Best,
    /// The parameters at the end of training.
    Last,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; repeat to aggregate several runs.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Test episodes [default: test.episodes from the checkpoint's config].
    #[arg(long)]
    pub episodes: Option<u64>,
    /// Seed for the test episodes [default: VARSCALE_SEED, else the run's seed].
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "best")]
    pub model: WhichModel,
    /// Per-task scaling dump for amortized models
    /// [default: <checkpoint stem>-task-mu.csv next to the checkpoint].
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Per-episode accuracies as CSV.
    #[arg(long)]
    pub episodes_csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Base config document (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prior means, comma separated (matrix rows).
    #[arg(long, value_delimiter = ',')]
    pub mu0: Vec<f64>,
    /// Initial posterior means, comma separated (matrix columns).
    #[arg(long, value_delimiter = ',')]
    pub mu_init: Vec<f64>,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
    /// Config overrides applied to every cell.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// [default: VARSCALE_SEED, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random instances to check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = varscale_verify::gradcheck::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Report CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    [Method::Pn, Method::Svs, Method::Dsvs, Method::Davs]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("unknown method `{s}` (expected pn, svs, dsvs or davs)"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

//! `mgdin` experiment front-end.

mod commands;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgdin::experiment::SweepAxis;

#[derive(Parser, Debug)]
#[command(
    name = "mgdin",
    version,
    about = "Train, evaluate and ablate multi-granularity deferred-interaction CTR models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset, its true logits and a manifest.
    Generate(Common),
    /// Train on the configured data for each seed and evaluate on the held-out set.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the configured held-out set.
    Eval(EvalArgs),
    /// Full model vs. the single-window and dense-interaction variants, per seed.
    Ablate(Common),
    /// One run per sweep point per seed.
    Sweep(SweepArgs),
    /// Finite-difference check of every parameter gradient on the reference configuration.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every config-driven command. Flags override the file,
/// which overrides built-in defaults.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run with this single seed instead of the configured seed list.
    /// For `generate` it replaces the data seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory for results (`generate`: the dataset directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Override the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisArg {
    /// Number of granularity windows K.
    GranularityCount,
    /// Per-layer sparsity ratio schedules.
    DeferredRatios,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::GranularityCount => SweepAxis::GranularityCount,
            AxisArg::DeferredRatios => SweepAxis::DeferredRatios,
        }
    }
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seed for parameters and the probe batch.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
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
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Eval(a) => commands::eval(&a, &argv),
        Command::Ablate(a) => commands::ablate(&a, &argv),
        Command::Sweep(a) => commands::sweep(&a, &argv),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

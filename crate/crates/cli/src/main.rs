//! `ctxcrf` command-line tool.
//!
//! Settings come from an optional TOML run configuration (`--config`);
//! command-line flags override the values read from it, and anything left
//! unset falls back to the built-in defaults.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctxcrf::Error;

/// Process exit status of a failed command.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Io(String),
    Check(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 3,
            Failure::Io(_) => 4,
            Failure::Check(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Check(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Config(msg),
            Error::Io { .. } | Error::Format { .. } => Failure::Io(msg),
            _ => Failure::Other(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ctxcrf", version, about = "Contextual deep CRF semantic segmentation")]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; all cores when unset.
    #[arg(long, global = true, env = "CTXCRF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest, or run the ablation study.
    Train(TrainArgs),
    /// Label every image of a manifest with a trained model.
    Predict(PredictArgs),
    /// Score predicted masks against the ground truth of a manifest.
    Eval(EvalArgs),
    /// Print CRF graph statistics for a feature-map grid.
    Inspect(InspectArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory (images/, masks/, manifest.tsv).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_images: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long, required_unless_present = "ablation")]
    pub manifest: Option<PathBuf>,
    /// Checkpoint path to write.
    #[arg(long, required_unless_present = "ablation")]
    pub out: Option<PathBuf>,
    /// Training log (tab-separated); defaults to the checkpoint path with a `.log` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train and evaluate the five ablation settings on synthetic data and
    /// print the table. Without `--config` the built-in study settings are used.
    #[arg(long, conflicts_with_all = ["manifest", "out", "log"])]
    pub ablation: bool,
    /// Where to write the ablation table; stdout by default.
    #[arg(long, requires = "ablation")]
    pub table: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for `<id>.pgm` label masks.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the coarse marginals as `<id>.scores.json`.
    #[arg(long)]
    pub scores: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding `<id>.pgm` predictions.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Class count; taken from the configuration when unset.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Tab-separated report; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Structured (JSON) report.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Feature-map rows.
    #[arg(long)]
    pub height: usize,
    /// Feature-map columns.
    #[arg(long)]
    pub width: usize,
    /// Keep every candidate in the range boxes instead of sampling.
    #[arg(long)]
    pub no_sampling: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Number of seeds; each check runs once per seed.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Other(format!("thread pool: {e}")))?;
    }
    let ctx = commands::Context {
        config_path: cli.config,
        seed: cli.seed,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::Predict(a) => commands::predict(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Inspect(a) => commands::inspect(&ctx, &a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

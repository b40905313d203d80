//! `partlatent` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure. Failures also print one JSON line on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    fn code(&self) -> (&'static str, u8) {
        match self.kind {
            ErrorKind::Usage => ("usage", 1),
            ErrorKind::Data => ("data", 2),
            ErrorKind::Numerical => ("numerical", 3),
        }
    }
}

impl From<partlatent::Error> for CliError {
    fn from(e: partlatent::Error) -> Self {
        Self {
            kind: if e.is_numerical() {
                ErrorKind::Numerical
            } else {
                ErrorKind::Data
            },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(format!("JSON: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "partlatent", version, about = "Part-based 3D shape modelling and generation")]
struct Cli {
    /// key = value file supplying defaults for any long flag; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic segmented chair dataset.
    MakeData(MakeDataArgs),
    /// Fit one statistical shape model per part category.
    FitSsm(FitSsmArgs),
    /// Train the latent diffusion model; writes a checkpoint and a loss CSV.
    Train(TrainArgs),
    /// Generate shapes as PLY files plus a latents JSON.
    Sample(SampleArgs),
    /// Complete whole shapes from a partial part observation (PLY).
    Complete(CompleteArgs),
    /// Edit saved latents: add, replace, remove, interpolate or mix parts.
    Edit(EditArgs),
    /// Compare generated and reference shape sets (MMD, COV, 1-NNA).
    Eval(EvalArgs),
    /// Serve the HTTP API for a checkpoint.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of shapes [default: 2000].
    #[arg(long)]
    pub n: Option<usize>,
    /// Points per part [default: 256].
    #[arg(long)]
    pub points: Option<usize>,
    /// Deformation amplitude multiplier [default: 1].
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitSsmArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the shape-model files and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Requested components per category, clamped to the data rank [default: 64].
    #[arg(long)]
    pub q: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory written by fit-ssm.
    #[arg(long)]
    pub ssm: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss CSV path [default: <out>.loss.csv].
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    /// Optimizer steps [default: 8000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [default: 5e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Linear warm-up steps [default: min(800, steps / 10)].
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub final_lr_fraction: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Weight moving-average decay; 0 keeps the raw weights [default: 0.999].
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of diffusion steps T [default: 200].
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub time_dim: Option<usize>,
    #[arg(long)]
    pub ff_mult: Option<usize>,
    #[arg(long)]
    pub weight_mse: Option<f64>,
    #[arg(long)]
    pub weight_ce: Option<f64>,
    #[arg(long)]
    pub weight_kl: Option<f64>,
    /// Draw training labels from the class Gaussians (true) or use the means.
    #[arg(long)]
    pub noisy_labels: Option<bool>,
    /// Label channels at the start of sampling: noised-padding or pure-noise.
    #[arg(long)]
    pub label_init: Option<String>,
    /// Log the loss every this many steps [default: 100].
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Number of shapes [default: 16].
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// PLY file with the observed points of one part.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Number of completions [default: 3].
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// latents.json written by sample, complete or edit.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Shape index within --latents [default: 0].
    #[arg(long)]
    pub index: Option<usize>,
    /// add, replace, remove, interpolate or mix.
    #[arg(long)]
    pub op: Option<String>,
    /// Category id or name (add, replace, remove, mix).
    #[arg(long)]
    pub category: Option<String>,
    /// Comma-separated whitened latent for add and replace [default: zeros].
    #[arg(long, allow_hyphen_values = true)]
    pub z: Option<String>,
    /// Second latents file for interpolate and mix [default: --latents].
    #[arg(long)]
    pub other: Option<PathBuf>,
    /// Shape index within --other.
    #[arg(long)]
    pub other_index: Option<usize>,
    /// Row of the first shape to interpolate.
    #[arg(long)]
    pub row: Option<usize>,
    /// Interpolation weight in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Seed for the refinement chain of mix.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated set: a directory of PLY files or a dataset directory.
    #[arg(long)]
    pub gen: Option<PathBuf>,
    /// Reference set, same formats as --gen.
    #[arg(long = "ref", value_name = "DIR")]
    pub reference: Option<PathBuf>,
    /// Use at most this many shapes from each set.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Points per evaluation cloud [default: 2048].
    #[arg(long)]
    pub eval_points: Option<usize>,
    /// Points per cloud for EMD; 0 skips EMD [default: 128].
    #[arg(long)]
    pub emd_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics JSON path [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// [default: 127.0.0.1]
    #[arg(long)]
    pub host: Option<String>,
    /// [default: 8080]
    #[arg(long)]
    pub port: Option<u16>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => config::Config::load(path)?,
        None => config::Config::default(),
    };
    match cli.command {
        Command::MakeData(a) => commands::make_data(a, &config),
        Command::FitSsm(a) => commands::fit_ssm(a, &config),
        Command::Train(a) => commands::train(a, &config),
        Command::Sample(a) => commands::sample(a, &config),
        Command::Complete(a) => commands::complete(a, &config),
        Command::Edit(a) => commands::edit(a, &config),
        Command::Eval(a) => commands::eval(a, &config),
        Command::Serve(a) => commands::serve(a, &config),
    }?;
    for key in config.unused() {
        log::warn!("config key '{key}' is not used by this subcommand");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(
                e.kind(),
                K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(1)
                } else {
                    ExitCode::SUCCESS
                };
            }
            let _ = e.print();
            return fail(&CliError::usage(e.kind().to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let (code, exit) = e.code();
    eprintln!(
        "{}",
        serde_json::json!({"error": {"code": code, "exit": exit, "message": e.message}})
    );
    ExitCode::from(exit)
}

//! `pchier`: generate synthetic sequences, train, evaluate and decompose.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pchier_core::data::PresetKind;
use pchier_core::network::Variant;

pub use config::UsageError;

#[derive(Debug, Parser)]
#[command(name = "pchier", version, about = "Hierarchical point cloud sequence prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic sequences, one directory per seed.
    Generate(GenerateArgs),
    /// Train a model on a directory of sequences.
    Train(TrainArgs),
    /// Evaluate a trained model against the copy-last baseline.
    Eval(EvalArgs),
    /// Split one predicted motion field into per-level contributions.
    Decompose(DecomposeArgs),
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON config file, or a run.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Only log warnings and errors.
    #[arg(long)]
    pub quiet: bool,
}

fn parse_preset(s: &str) -> Result<PresetKind, String> {
    s.parse().map_err(|e: pchier_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: pchier_core::Error| e.to_string())
}

fn parse_point(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected three comma-separated numbers".to_string())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// rigid_translation, translating_rotor or articulated_walker.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<PresetKind>,
    /// Points per frame.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Seed list: `a..b` (inclusive) or `a,b,c`. `--seed` gives a single one.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Body velocity per frame, `x,y,z`.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    pub velocity: Option<[f64; 3]>,
    /// Rotor angular speed, radians per frame.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Walker leg swing amplitude, radians.
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Walker gait period, frames.
    #[arg(long)]
    pub period: Option<f64>,
    /// Gaussian jitter per coordinate.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// A sequence directory, or a directory of sequence directories.
    #[arg(long)]
    pub data: PathBuf,
    /// classic, shallow, single-scale or without-combination.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the EMD term in the loss.
    #[arg(long)]
    pub lambda_emd: Option<f64>,
    #[arg(long)]
    pub levels: Option<usize>,
    /// Downsampling factor between levels.
    #[arg(long)]
    pub factor: Option<usize>,
    /// Neighbourhood size per level, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Feature width per level, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub feature_widths: Option<Vec<usize>>,
    /// Propagation layer widths: stages separated by `;`, layers by `,`.
    #[arg(long)]
    pub fp_widths: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory of a `train` run.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A sequence directory, or a directory of sequence directories.
    #[arg(long)]
    pub data: PathBuf,
    /// Frames consumed before the first prediction.
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Subsample both clouds to this size before EMD.
    #[arg(long)]
    pub emd_cap: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory of a `train` run.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence directory.
    #[arg(long)]
    pub sequence: PathBuf,
    /// Frame whose outgoing motion is decomposed.
    #[arg(long)]
    pub frame: Option<usize>,
}

fn init_logging(quiet: bool) {
    let default = if quiet { "warn" } else { "info" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).with_target(false).try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let quiet = match &cli.command {
        Command::Generate(a) => a.common.quiet,
        Command::Train(a) => a.common.quiet,
        Command::Eval(a) => a.common.quiet,
        Command::Decompose(a) => a.common.quiet,
    };
    init_logging(quiet);
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Decompose(a) => commands::decompose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

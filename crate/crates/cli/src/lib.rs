//! The `xfr` command line: dataset generation, matcher training,
//! threshold calibration, triplet filtering, saliency maps, evaluation and
//! montages.

pub mod commands;
pub mod methods;
pub mod record;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use methods::{saliency_for_triplet, Method, MethodParams};

#[derive(Debug, Parser)]
#[command(name = "xfr", version, about = "Explainable face matching toolkit")]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log filter, e.g. `info` or `xfr_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Train the reference matcher on the training split.
    Train(TrainArgs),
    /// Calibrate the verification threshold on the calibration split.
    Calibrate(CalibrateArgs),
    /// Keep the triplets that pass both verification criteria.
    Filter(FilterArgs),
    /// Write one saliency map per triplet.
    Saliency(SaliencyArgs),
    /// Run the inpainting game on a directory of saliency maps.
    Eval(EvalArgs),
    /// Grids of probes and saliency overlays.
    Montage(MontageArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Calibrate(_) => "calibrate",
            Command::Filter(_) => "filter",
            Command::Saliency(_) => "saliency",
            Command::Eval(_) => "eval",
            Command::Montage(_) => "montage",
        }
    }
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Render config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the number of evaluation subjects.
    #[arg(long)]
    pub evaluation_identities: Option<usize>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long, env = "XFR_DATASET")]
    pub dataset: PathBuf,
    /// Output directory for the weights and training report.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct CalibrateArgs {
    #[arg(long, env = "XFR_DATASET")]
    pub dataset: PathBuf,
    #[arg(long, env = "XFR_WEIGHTS")]
    pub weights: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target false accept rate.
    #[arg(long, default_value_t = xfr_core::game::DEFAULT_FAR)]
    pub far: f64,
    /// Fit on half of the calibration subjects and measure the false
    /// accept rate on impostor pairs of the other half.
    #[arg(long)]
    pub holdout: bool,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct FilterArgs {
    #[arg(long, env = "XFR_DATASET")]
    pub dataset: PathBuf,
    #[arg(long, env = "XFR_WEIGHTS")]
    pub weights: PathBuf,
    /// A threshold value, or the `threshold.json` written by `calibrate`.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientArg {
    Descent,
    Verbatim,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightArg {
    Verbatim,
    Reversed,
}

#[derive(Debug, Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillArg {
    Blur,
    Gray,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SaliencyArgs {
    /// Filtered manifest (file or directory).
    #[arg(long, env = "XFR_DATASET")]
    pub dataset: PathBuf,
    #[arg(long, env = "XFR_WEIGHTS")]
    pub weights: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub out: PathBuf,
    /// Triplet-loss margin.
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f32,
    /// Subtree node count.
    #[arg(long, default_value_t = xfr_core::subtree::DEFAULT_K)]
    pub k: usize,
    /// Subtree gradient sign.
    #[arg(long, value_enum, default_value = "descent")]
    pub gradient: GradientArg,
    /// tcEBP percentile.
    #[arg(long, default_value_t = xfr_core::attribution::DEFAULT_TRUNCATION_PERCENTILE)]
    pub truncation: f64,
    /// DISE mask count.
    #[arg(long, default_value_t = xfr_core::dise::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// DISE prior truncation percentile.
    #[arg(long, default_value_t = xfr_core::dise::DEFAULT_PRIOR_PERCENTILE)]
    pub prior_percentile: f64,
    /// DISE loss-change sign.
    #[arg(long, value_enum, default_value = "verbatim")]
    pub weight: WeightArg,
    /// DISE occlusion fill.
    #[arg(long, value_enum, default_value = "blur")]
    pub fill: FillArg,
    /// DISE mask element size in pixels; the grid is ceil(64 / size) cells a side.
    #[arg(long, default_value_t = xfr_core::dise::MaskSpec::default().cell_size)]
    pub cell_size: usize,
    /// Only the first N triplets.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct EvalArgs {
    #[arg(long, env = "XFR_DATASET")]
    pub dataset: PathBuf,
    #[arg(long, env = "XFR_WEIGHTS")]
    pub weights: PathBuf,
    /// Output directory of a `saliency` run.
    #[arg(long)]
    pub saliency: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Label for the tables (default: the method in the saliency run).
    #[arg(long)]
    pub name: Option<String>,
    /// Operating points on the pixel false-positive axis.
    #[arg(long = "fpr", default_values_t = xfr_core::game::DEFAULT_OPERATING_FPRS)]
    pub fprs: Vec<f64>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct MontageArgs {
    #[arg(long, env = "XFR_DATASET")]
    pub dataset: PathBuf,
    /// `NAME=DIR` saliency runs, one column each.
    #[arg(long = "saliency")]
    pub saliency: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Triplets (rows) per montage.
    #[arg(long, default_value_t = 8)]
    pub rows: usize,
    /// Only triplets of this region.
    #[arg(long)]
    pub region: Option<String>,
    /// Also write a layerwise EBP grid per row triplet (needs weights).
    #[arg(long)]
    pub layerwise: bool,
    /// Also write a grid of the top subtree node maps per row triplet.
    #[arg(long)]
    pub subtree_nodes: bool,
    #[arg(long, env = "XFR_WEIGHTS")]
    pub weights: Option<PathBuf>,
}

/// Parses `std::env::args`, runs the command and maps the outcome to an
/// exit code.
pub fn main_entry() -> std::process::ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

//! Command-line front door for the quantization pipeline.
//!
//! Stages: `fixture` writes a seeded model and calibration set, `calibrate`
//! exports per-channel activation maxima, `search` grid-searches the
//! smoothing strength, `smooth` rescales the model, `quantize` packs linear
//! weights to 4 bits, and `eval` compares RTN against smoothed quantization
//! and reports per-layer losses plus the storage footprint.
//!
//! Every command writes a `<output>.manifest.json` beside each artifact and
//! exits 0 only after re-reading and validating everything it wrote. Errors
//! print one JSON line on stderr. Given identical inputs, artifacts are
//! byte-identical across runs; manifests differ only in `wall_time_ms`.

mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, Subcommand};

use quantkit::smoothing::LossMode;

#[derive(Parser)]
#[command(name = "quantkit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Smoothing strength: a number in [0, 1] or `searched` to run a grid search.
#[derive(Clone, Debug)]
pub enum AlphaArg {
    Value(f64),
    Searched,
}

impl FromStr for AlphaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "searched" {
            return Ok(AlphaArg::Searched);
        }
        let value: f64 = s
            .parse()
            .map_err(|_| format!("expected a number in [0, 1] or \"searched\", got {s:?}"))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(format!("alpha {value} not in [0, 1]"));
        }
        Ok(AlphaArg::Value(value))
    }
}

fn parse_mode(s: &str) -> Result<LossMode, String> {
    LossMode::from_str(s).map_err(|e| e.to_string())
}

#[derive(clap::Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 172)]
    pub intermediate: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 3)]
    pub outlier_channels: usize,
    #[arg(long, default_value_t = 100.0)]
    pub outlier_scale: f32,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub tokens: usize,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub out_calib: PathBuf,
}

#[derive(clap::Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out_stats: PathBuf,
}

#[derive(clap::Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = quantkit::quant::DEFAULT_GROUP_SIZE)]
    pub group_size: usize,
    #[arg(long, default_value = "propagated", value_parser = parse_mode)]
    pub mode: LossMode,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the curve as CSV for plotting.
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct SmoothArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Number in [0, 1], or `searched` to pick by grid search.
    #[arg(long)]
    pub alpha: AlphaArg,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = quantkit::quant::DEFAULT_GROUP_SIZE)]
    pub group_size: usize,
    #[arg(long, default_value = "propagated", value_parser = parse_mode)]
    pub mode: LossMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = quantkit::quant::DEFAULT_GROUP_SIZE)]
    pub group_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Which variant anchors the comparison in the summary.
    #[arg(long, default_value = "rtn", value_parser = ["rtn", "smoothed"])]
    pub baseline: String,
    /// Smoothing strength for the smoothed variant.
    #[arg(long, default_value = "searched")]
    pub alpha: AlphaArg,
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = quantkit::quant::DEFAULT_GROUP_SIZE)]
    pub group_size: usize,
    #[arg(long, default_value = "propagated", value_parser = parse_mode)]
    pub mode: LossMode,
    #[arg(long)]
    pub out_report: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic model bundle and calibration container.
    Fixture(FixtureArgs),
    /// Collect per-channel activation maxima into a JSON stats file.
    Calibrate(CalibrateArgs),
    /// Grid-search the smoothing strength minimizing whole-model loss.
    Search(SearchArgs),
    /// Apply activation smoothing and write the adjusted FP bundle.
    Smooth(SmoothArgs),
    /// Group-quantize all linear weights into a q4 container.
    Quantize(QuantizeArgs),
    /// Compare RTN and smoothed quantization; write per-layer loss CSV and
    /// the footprint report.
    Eval(EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();

    let result = match cli.command {
        Command::Fixture(args) => pipeline::run_fixture(&args),
        Command::Calibrate(args) => pipeline::run_calibrate(&args),
        Command::Search(args) => pipeline::run_search(&args),
        Command::Smooth(args) => pipeline::run_smooth(&args),
        Command::Quantize(args) => pipeline::run_quantize(&args),
        Command::Eval(args) => pipeline::run_eval(&args),
    };

    match result {
        Ok(outcome) => {
            let wall_time_ms = started.elapsed().as_millis() as u64;
            if let Err(err) = outcome.finish(wall_time_ms) {
                eprintln!("{}", manifest::error_line(&err.to_string()));
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", manifest::error_line(&err.to_string()));
            ExitCode::FAILURE
        }
    }
}

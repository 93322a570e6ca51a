//! Command-line front end: synthetic data generation, training, evaluation,
//! derivative checks and metric plots.

mod commands;
pub mod svg;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genseg_core::engine::Mode;
use genseg_core::synthdata::Difficulty;

pub use commands::run;

/// Parses `args` (program name first) and runs the command in-process.
pub fn run_args<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::usage(e.to_string()))?;
    run(cli)
}

/// Exit status of a usage error: bad flags, bad config, unusable input.
pub const EXIT_USAGE: u8 = 2;
/// Exit status of a failed run or a failed check.
pub const EXIT_FAILURE: u8 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self { code: EXIT_FAILURE, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<genseg_core::Error> for CliError {
    fn from(e: genseg_core::Error) -> Self {
        use genseg_core::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) => Self::usage(e.to_string()),
            _ => Self::failure(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failure(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "genseg", version, about = "Generative augmentation for segmentation, trained end to end")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train in genseg, separate or baseline mode.
    Train(TrainArgs),
    /// Score a checkpoint's segmenter on a dataset.
    Eval(EvalArgs),
    /// Compare analytic derivatives against finite differences.
    Gradcheck(GradcheckArgs),
    /// Plot metric curves from one or more metrics.csv files as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of pairs.
    #[arg(long)]
    pub n: usize,
    /// Image extent; a power of two, at least 8.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value = "default", value_parser = parse_difficulty)]
    pub difficulty: Difficulty,
    /// Write `train/`, `val/` and `test/` subsets of these sizes instead of
    /// one flat dataset, e.g. `20,5,200`. The sizes must sum to `--n`.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Dataset directory; overrides `data_dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key=value` override applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Allow replacing existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Suppress the per-evaluation progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory with a manifest.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    /// every operation and the three networks
    Grad,
    /// mixed second-order products, finite difference against exact
    Hvp,
    /// the architecture hypergradient against unrolled finite differences
    Hyper,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Level::Grad)]
    pub level: Level,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Config override for the `hyper` instance; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Use the zero vector as the `hvp` direction.
    #[arg(long)]
    pub zero_direction: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub metrics: Vec<PathBuf>,
    /// Column to plot; repeatable.
    #[arg(long = "metric", default_values_t = [String::from("dice")])]
    pub columns: Vec<String>,
    /// Rows of this split are plotted.
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn parse_difficulty(s: &str) -> Result<Difficulty, String> {
    Difficulty::parse(s).ok_or_else(|| format!("unknown difficulty {s:?} (expected easy, default or hard)"))
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: genseg_core::Error| e.to_string())
}

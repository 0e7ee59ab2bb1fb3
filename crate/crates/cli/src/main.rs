//! `layoutguide` command-line driver.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 when a
//! run fails.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default output root.
pub const ENV_OUT: &str = "LAYOUTGUIDE_OUT";
/// Environment variable fixing the worker thread count.
pub const ENV_THREADS: &str = "LAYOUTGUIDE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "layoutguide", version, about = "Layout-guided sampling for a toy text-to-image model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads the run configuration.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set sampler.cfg_scale=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory. Defaults to `$LAYOUTGUIDE_OUT/<command>` or `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy denoiser from scratch.
    Train(TrainArgs),
    /// Sample images for one layout.
    Generate(GenerateArgs),
    /// Sample one layout under each ablation row, seed-matched.
    Ablate(AblateArgs),
    /// Score a prompt suite across the ablation grid.
    Benchmark(BenchmarkArgs),
    /// Summarize a sampling trace.
    Trace(TraceArgs),
    /// Write the seeded default prompt suite.
    Suite(SuiteArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Shorthand for `--set train.steps=N`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub weights: PathBuf,
    /// Layout JSON (prompt words and subject boxes).
    #[arg(long)]
    pub layout: PathBuf,
    /// Replaces the layout's prompt with the whitespace-separated words of
    /// this file. Binding indices refer to positions in the new prompt.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Loss terms to switch off: any of iou, mask, kl, att.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    /// Nearest-neighbour upscaling factor for the written PNG.
    #[arg(long, default_value_t = 1)]
    pub upscale: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub layout: PathBuf,
    /// Ablation rows, `all` or e.g. `1,4,5`.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    pub upscale: usize,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub weights: PathBuf,
    /// Suite JSON. Without it the seeded default suite is used.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Also write every generated image.
    #[arg(long)]
    pub save_images: bool,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    pub path: PathBuf,
    /// Print the summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long, default_value_t = layoutguide::eval::benchmark::DEFAULT_SUITE_SIZE)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Trace(a) => commands::trace(a),
        Command::Suite(a) => commands::suite(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

//! `rankprobe`: generate planted data, train and transfer probes, and report
//! layer sweeps, win rates and projections.
//!
//! Exit codes: 0 success, 1 data or compatibility error, 2 usage error,
//! 3 numerical failure.

mod commands;
mod config;
mod extract;
mod output;
mod viz;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const SEED_ENV: &str = "PROBE_SEED";

#[derive(Debug, Parser)]
#[command(name = "rankprobe", version, about = "Geometric probes over serialized model activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic archive or fixture file.
    Gen(GenArgs),
    /// Write a job spec for the activation extractor.
    ExtractManifest(extract::ExtractArgs),
    /// Train a probe on one layer of an archive.
    Train(TrainArgs),
    /// Score a probe on an archive layer.
    Eval(EvalArgs),
    /// Train and score one probe per layer.
    Sweep(SweepArgs),
    /// Apply a frozen probe to another task.
    Transfer(EvalArgs),
    /// Win rates of item groups under one or more frozen probes.
    BiasReport(BiasArgs),
    /// Export 2-D or 3-D probe projections as SVG and CSV.
    Viz(VizArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    PlantedOrder,
    PlantedPreference,
    Multilayer,
    Groups,
    Numbers,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: GenKind,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// File stem; defaults to the kind name.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long = "H", alias = "hidden-dim", default_value_t = 64)]
    pub hidden_dim: usize,
    #[arg(long = "W", alias = "items", default_value_t = 8)]
    pub items: usize,
    /// Instances (or pairs).
    #[arg(long = "N", alias = "instances", default_value_t = 200)]
    pub instances: usize,
    /// Gaussian noise; 0 for orders, 0.1 for pairs and groups when omitted.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub layer_id: u32,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub signal_layer: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gap: f64,
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    /// Draw the separator (or group direction) from this seed instead of `--seed`.
    #[arg(long)]
    pub direction_seed: Option<u64>,
    /// Draw the separator orthogonal to the direction of this seed.
    #[arg(long, conflicts_with = "direction_seed")]
    pub orthogonal_to: Option<u64>,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = -1000, allow_hyphen_values = true)]
    pub low: i64,
    #[arg(long, default_value_t = 1000, allow_hyphen_values = true)]
    pub high: i64,
    #[arg(long, value_delimiter = ',', default_values_t = ["a".to_string(), "b".to_string()])]
    pub groups: Vec<String>,
    /// Per-group shift along the direction; zero when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub shifts: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub pairs_per_pairing: usize,
}

/// Training hyperparameters; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct HyperArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub probe_dim: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    #[arg(long = "l2")]
    pub l2_penalty: Option<f64>,
    #[arg(long = "max-iter")]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Unit-normalize embeddings before projecting (order probes).
    #[arg(long)]
    pub normalize: bool,
    /// JSON file shaped like the typed training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelFilter {
    Any,
    Human,
    Model,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Layer id or `middle`.
    #[arg(long, default_value = "middle")]
    pub layer: String,
    #[arg(long, value_parser = commands::PROBE_KINDS)]
    pub kind: String,
    #[arg(long)]
    pub task: Option<String>,
    /// Restrict pairwise training to one label source.
    #[arg(long, value_enum, default_value_t = LabelFilter::Any)]
    pub labels: LabelFilter,
    /// Output `.probe.json` path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub archive: PathBuf,
    /// Layer id or `middle`; defaults to the probe's layer.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    /// Seed for position balancing.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long, value_parser = commands::PROBE_KINDS)]
    pub kind: String,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    /// Probe file; repeat to average over several probes.
    #[arg(long = "probe", required = true)]
    pub probes: Vec<PathBuf>,
    #[arg(long)]
    pub archive: PathBuf,
    /// Layer id or `middle`; defaults to each probe's layer.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub probe: PathBuf,
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub layer: Option<String>,
    /// Instance id; repeatable. Defaults to the first ranked instance.
    #[arg(long = "instance")]
    pub instances: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::ExtractManifest(a) => extract::run(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a, commands::EvalMode::Eval),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Transfer(a) => commands::eval(&a, commands::EvalMode::Transfer),
        Command::BiasReport(a) => commands::bias_report(&a),
        Command::Viz(a) => viz::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}

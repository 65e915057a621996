//! Argument surface: `gnnmoe gen|train|eval|sweep-depth|bench`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "gnnmoe", version, about = "Mixture-of-experts message passing for node classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with controllable edge homophily.
    Gen(GenArgs),
    /// Train over the configured seeds and write metrics plus checkpoints.
    Train(RunArgs),
    /// Evaluate a trained checkpoint from a run directory.
    Eval(EvalArgs),
    /// Train at several depths, with a degraded baseline for contrast.
    #[command(name = "sweep-depth")]
    SweepDepth(SweepDepthArgs),
    /// Report epochs-to-early-stop and total training wall-clock.
    Bench(RunArgs),
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a real number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Number of nodes.
    #[arg(long)]
    pub nodes: usize,
    /// Number of classes (labels are assigned round-robin).
    #[arg(long)]
    pub classes: usize,
    /// Feature dimension.
    #[arg(long)]
    pub dim: usize,
    /// Fraction of edges joining same-class endpoints, in [0, 1].
    #[arg(long, value_parser = unit_interval)]
    pub homophily: f64,
    /// Mean node degree.
    #[arg(long)]
    pub degree: f64,
    /// Feature noise standard deviation.
    #[arg(long)]
    pub noise: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for edges.tsv / features.csv / labels.txt.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// key=value config file; command-line overrides win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides the config `data` key).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run output directory (overrides the config `out` key).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra overrides, repeatable: --set lr=0.05 --set num_blocks=4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Ablations: `ffn` (drop the enhanced FFN) or `residual` (drop the
    /// adaptive residuals). Repeatable.
    #[arg(long = "ablate", value_name = "ffn|residual")]
    pub ablate: Vec<String>,
    /// Comma-separated seed list (overrides the config `seeds` key).
    #[arg(long)]
    pub seeds: Option<String>,
    /// Run this many seeds concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory containing manifest.txt and checkpoints.
    #[arg(long)]
    pub run: PathBuf,
    /// Which seed's checkpoint to evaluate (default: first seed of the run).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Node set to score: train, val, test, or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluate on a different dataset than the manifest's.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepDepthArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated list of block counts, e.g. 2,4,8,16.
    #[arg(long)]
    pub depths: String,
}

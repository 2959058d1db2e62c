use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qsft_core::algorithms::Algo;
use qsft_core::eval::EvalMode;

use crate::envargs::EnvArgs;

#[derive(Debug, Parser)]
#[command(name = "qsft", version, about = "Offline RL lab: Q-SFT and baselines on small discrete tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an offline dataset.
    GenData(GenDataArgs),
    /// Train one method on a dataset.
    Train(TrainArgs),
    /// Check the likelihood bounds on random tabular MDPs.
    Verify(VerifyArgs),
    /// Roll out a trained checkpoint.
    Eval(EvalArgs),
    /// Run a method by seed grid and tabulate the results.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub env: EnvArgs,
    /// Number of trajectories.
    #[arg(long)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, or a `.jsonl` file with sidecars next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Mixture weight of the scripted policy against uniform actions.
    /// Without it gridworld-stitch emits its two trajectory families and the
    /// other environments use 0.5.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgoArg {
    Qsft,
    Bc,
    Tdq,
    FilteredBc,
    Rcsl,
}

impl From<AlgoArg> for Algo {
    fn from(a: AlgoArg) -> Algo {
        match a {
            AlgoArg::Qsft => Algo::Qsft,
            AlgoArg::Bc => Algo::Bc,
            AlgoArg::Tdq => Algo::Tdq,
            AlgoArg::FilteredBc => Algo::FilteredBc,
            AlgoArg::Rcsl => Algo::Rcsl,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub algo: AlgoArg,
    /// Dataset directory or `.jsonl` file.
    #[arg(long)]
    pub data: PathBuf,
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training seed; same as `--set seed=S`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key; applied after the file and `--seed`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Number of random MDPs.
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    #[arg(long, default_value_t = 3)]
    pub min_states: usize,
    #[arg(long, default_value_t = 20)]
    pub max_states: usize,
    /// Action-count range `a..b` (inclusive) or a single count.
    #[arg(long, default_value = "3..5")]
    pub actions: String,
    #[arg(long, value_delimiter = ',', default_value = "0.9,0.95")]
    pub gamma: Vec<f64>,
    #[arg(long, default_value_t = 1e-6, allow_negative_numbers = true)]
    pub tol: f64,
    #[arg(long, default_value_t = 3)]
    pub branching: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the environment recorded in the checkpoint.
    #[command(flatten)]
    pub env: EnvArgs,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "sample")]
    pub mode: EvalMode,
    /// Extraction temperature; defaults to the training value.
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// RCSL conditioning target in dataset reward units; defaults to the
    /// scripted policy's mean return.
    #[arg(long, allow_negative_numbers = true)]
    pub target_return: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// `key = value` sweep file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override one sweep key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

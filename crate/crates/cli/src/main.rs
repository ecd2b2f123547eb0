//! `capiset` command-line tool. Exit codes: 0 success, 1 invalid input or
//! failed check, 2 numerical failure.

mod bench;
mod commands;
mod error;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use capiset::capi::LevelOptions;
use clap::{Args, Parser, Subcommand};

use crate::error::CliError;
use crate::inputs::SystemArgs;

#[derive(Parser, Debug)]
#[command(
    name = "capiset",
    version,
    about = "Admissible level sets of piecewise-affine neural Lyapunov functions"
)]
pub struct Cli {
    /// Seed for every random choice; recorded in each artifact.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Artifact path; stdout when absent.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Partition the Lyapunov network's domain and write the tree cache.
    BuildTree(BuildTreeArgs),
    /// Maximal admissible level for one or more references (CSV).
    Gamma(GammaArgs),
    /// Counterexample-guided training of a level estimator (weights JSON).
    TrainEstimator(TrainEstimatorArgs),
    /// Exact verification of a level estimator (JSON).
    Verify(VerifyArgs),
    /// Closed-loop run under the explicit reference governor (CSV).
    SimulateErg(SimulateErgArgs),
    /// Timing sweep over symmetric constraint bounds (CSV).
    Bench(BenchArgs),
    /// Sampled Lyapunov conditions of a network (JSON).
    CheckLyapunov(CheckArgs),
    /// Train a Lyapunov network for a built-in system (weights JSON).
    TrainFixture(TrainFixtureArgs),
}

#[derive(Args, Debug)]
pub struct BuildTreeArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
}

#[derive(Args, Clone, Copy, Debug)]
pub struct PruneArgs {
    /// Disable inactive-hyperplane pruning.
    #[arg(long)]
    pub no_ps1: bool,
    /// Disable lower-bound pruning of subtrees.
    #[arg(long)]
    pub no_ps2: bool,
    /// Disable interval screening of leaf and piece pairs.
    #[arg(long)]
    pub no_bbox: bool,
    /// Do not cap the level by the domain boundary.
    #[arg(long)]
    pub no_guard: bool,
}

impl PruneArgs {
    pub fn options(self) -> LevelOptions {
        LevelOptions {
            use_ps1: !self.no_ps1,
            use_ps2: !self.no_ps2,
            bbox_screen: !self.no_bbox,
            domain_guard: !self.no_guard,
        }
    }
}

#[derive(Args, Debug)]
pub struct GammaArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    /// Tree cache written by `build-tree`.
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// One reference as a comma-separated list; repeat for several.
    #[arg(long = "r", allow_hyphen_values = true)]
    pub r: Vec<String>,
    /// Evenly spaced scalar references.
    #[arg(long, num_args = 3, value_names = ["LO", "HI", "N"], allow_hyphen_values = true)]
    pub sweep: Option<Vec<String>>,
    #[command(flatten)]
    pub prune: PruneArgs,
    /// Use the constraint file's convex polytope and the one-LP-per-facet path.
    #[arg(long)]
    pub convex: bool,
    /// Parallel workers over references; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainEstimatorArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// Hidden widths, comma separated.
    #[arg(long, default_value = "8,4")]
    pub hidden: String,
    #[arg(long, default_value_t = 200)]
    pub pretrain: usize,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 3000)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 500)]
    pub iter_epochs: usize,
    /// Targets are the exact level scaled by `1 − margin`.
    #[arg(long, default_value_t = 0.02)]
    pub margin: f64,
    /// Shrink of the reference box on every side.
    #[arg(long, default_value_t = capiset::fixtures::CARTPOLE_REFERENCE_MARGIN)]
    pub reference_margin: f64,
    /// Training report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    #[arg(long)]
    pub tree: Option<PathBuf>,
    /// Estimator weights (defaults to the committed cart-pole estimator).
    #[arg(long)]
    pub estimator: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceKind {
    Estimator,
    Exact,
}

#[derive(Args, Debug)]
pub struct SimulateErgArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    #[arg(long)]
    pub tree: Option<PathBuf>,
    #[arg(long)]
    pub estimator: Option<PathBuf>,
    /// Where the admissible level comes from.
    #[arg(long, value_enum, default_value = "estimator")]
    pub source: SourceKind,
    /// Initial state, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: String,
    /// Target reference, comma separated.
    #[arg(long = "r", allow_hyphen_values = true)]
    pub r: String,
    /// Initial applied reference; chosen automatically when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub v0: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    pub eta: f64,
    /// Governor step; defaults to the plant's sampling time.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, default_value_t = 600)]
    pub horizon: usize,
    /// Box for the applied reference; defaults to the estimator's box.
    #[arg(long, allow_hyphen_values = true)]
    pub v_lo: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub v_hi: Option<String>,
    /// Apply the target directly, without the governor.
    #[arg(long)]
    pub direct: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    /// Timed repetitions per measurement.
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Untimed repetitions before each measurement.
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    /// Number of bounds in the sweep.
    #[arg(long, default_value_t = 5)]
    pub points: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lo: f64,
    #[arg(long, default_value_t = 1.0)]
    pub hi: f64,
    /// Also train an estimator at every bound and time it.
    #[arg(long)]
    pub train_estimator: bool,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct TrainFixtureArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    /// Hidden widths, comma separated.
    #[arg(long, default_value = "8")]
    pub hidden: String,
    /// Train without biases, so the network is positively homogeneous.
    #[arg(long)]
    pub zero_bias: bool,
    #[arg(long, default_value_t = 40)]
    pub max_rounds: usize,
    #[arg(long, default_value_t = 50_000)]
    pub check_samples: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()));
            return ExitCode::from(1);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

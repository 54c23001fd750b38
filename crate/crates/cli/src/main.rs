//! `snds`: train, evaluate and certify stable imitation policies.
//!
//! Exit codes: 0 success, 1 operational failure (bad flags, unreadable files,
//! divergence), 2 a certification check failed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use snds_core::dataio::SyntheticShape;
use snds_core::{PolicyMode, ProjectionActivation};

#[derive(Debug, Parser)]
#[command(name = "snds", version, about = "Stable neural dynamical-system policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a policy on a demonstration directory.
    Train(TrainArgs),
    /// Report MSE and DTW of a model against demonstrations.
    Eval(EvalArgs),
    /// Integrate the policy from one initial state and write the trajectory CSV.
    Rollout(RolloutArgs),
    /// Write the vector field, potential and decrease rate on a planar grid.
    ExportField(FieldArgs),
    /// Write a synthetic demonstration directory.
    GenData(GenDataArgs),
    /// Sample-check positivity, convexity, the decrease half space and convergence.
    Certify(CertifyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Stable,
    Unconstrained,
}

impl From<ModeArg> for PolicyMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Stable => PolicyMode::Stable,
            ModeArg::Unconstrained => PolicyMode::Unconstrained,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProjectionArg {
    Relu,
    Softplus,
}

impl From<ProjectionArg> for ProjectionActivation {
    fn from(p: ProjectionArg) -> Self {
        match p {
            ProjectionArg::Relu => ProjectionActivation::Relu,
            ProjectionArg::Softplus => ProjectionActivation::Softplus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Mse,
    Dtw,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShapeArg {
    Line,
    Sine,
    Spiral,
}

impl From<ShapeArg> for SyntheticShape {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Line => SyntheticShape::Line,
            ShapeArg::Sine => SyntheticShape::Sine,
            ShapeArg::Spiral => SyntheticShape::Spiral,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Demonstration directory (manifest.txt plus one CSV per demonstration).
    #[arg(long)]
    pub data: PathBuf,
    /// Model file to write; reports and loss curves go next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key = value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train once per seed and write a mean/std summary.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    pub clip: Option<f64>,
    /// Euler steps per window in the loss.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Add the square-root-velocity shape term to the loss.
    #[arg(long)]
    pub srvf: Option<bool>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub projection: Option<ProjectionArg>,
    /// Exponential decrease margin.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Denominator regularizer of the projection.
    #[arg(long)]
    pub regularizer: Option<f64>,
    /// Weight of the quadratic term of the potential.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub policy_sizes: Option<Vec<usize>>,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub icnn_sizes: Option<Vec<usize>>,
    /// Stop after this many epochs without holdout improvement.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RolloutFlags {
    /// Integration step; defaults to the data sampling period.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Step limit; defaults to ten times the longest demonstration.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Absolute convergence radius; defaults to 1e-2 of the data extent.
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub metric: MetricArg,
    /// Print one JSON document instead of text.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub rollout: RolloutFlags,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Trajectory CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Initial state; defaults to the first state of the first demonstration in --data.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', allow_negative_numbers = true)]
    pub x0: Option<Vec<f64>>,
    /// Demonstrations used for default start, step size and limits.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Displacement `step:dx1,dx2,...` added before that step; repeatable.
    #[arg(long, allow_hyphen_values = true)]
    pub perturb: Vec<String>,
    #[command(flatten)]
    pub rollout: RolloutFlags,
}

#[derive(Debug, Args)]
pub struct FieldArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Lower grid corner; defaults to the training box scaled by --scale.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', allow_negative_numbers = true, requires = "max")]
    pub min: Option<Vec<f64>>,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', allow_negative_numbers = true, requires = "min")]
    pub max: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.5)]
    pub scale: f64,
    /// Points per axis.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "50,50")]
    pub resolution: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub shape: ShapeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub demos: usize,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = snds_core::dataio::DEFAULT_DT)]
    pub dt: f64,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Demonstrations whose box is sampled; defaults to the box stored with the model.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub triples: usize,
    #[arg(long, default_value_t = 100)]
    pub rollouts: usize,
    /// Sampling box relative to the data box.
    #[arg(long, default_value_t = 3.0)]
    pub box_factor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.005)]
    pub dt: f64,
    #[arg(long, default_value_t = 3000)]
    pub max_steps: usize,
    /// Convergence radius relative to the data extent.
    #[arg(long, default_value_t = 1e-2)]
    pub radius: f64,
    #[arg(long)]
    pub json: bool,
}

/// Why a command stopped; selects the exit code.
#[derive(Debug)]
pub enum Failure {
    Operational(String),
    Certification(String),
}

impl From<snds_core::Error> for Failure {
    fn from(e: snds_core::Error) -> Self {
        Failure::Operational(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage problems are operational failures; 2 is reserved for certification
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::ExportField(a) => commands::export_field(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::Certify(a) => commands::certify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Operational(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Certification(msg)) => {
            eprintln!("certification failed: {msg}");
            ExitCode::from(2)
        }
    }
}

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use matchreg::features::{DEFAULT_KNN_K, NormMode};
use matchreg::matching::{DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_MATCH_THRESHOLD, DEFAULT_SINKHORN_ITERS};
use matchreg::metrics::DEFAULT_INLIER_THRESHOLD;
use matchreg::solver::{IcpDirection, DEFAULT_ICP_MAX_ITERS, DEFAULT_ICP_TOL};
use matchreg::supervision::DEFAULT_GT_THRESHOLD;
use matchreg::synth::{RotationRange, ShapeKind};

/// Failure carrying the process exit code: 1 for runtime and IO problems,
/// 2 for usage and configuration problems.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<matchreg::Error> for CliError {
    fn from(e: matchreg::Error) -> Self {
        use matchreg::Error as E;
        let code = match e {
            E::InvalidArgument(_) | E::NonPositiveLambda(_) | E::EmptyInput => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "matchreg", version, about = "Partial-to-whole point cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic source/target dataset.
    Gen(GenArgs),
    /// Train the feature network on a dataset.
    Train(TrainArgs),
    /// Register one target cloud against one source cloud.
    Register(RegisterArgs),
    /// Evaluate a model on a dataset.
    Eval(EvalArgs),
    /// Train with match normalization and with per-instance normalization, then compare.
    Ablate(AblateArgs),
    /// Tabulate SVD factor and rotation sensitivity against the singular value gap.
    ProbeSvd(ProbeArgs),
}

#[derive(Args, Debug)]
struct SynthFlags {
    /// Source points per pair.
    #[arg(long, default_value_t = 1024)]
    m: usize,
    /// Target points per pair.
    #[arg(long, default_value_t = 768)]
    n: usize,
    /// Comma-separated shape kinds.
    #[arg(long, value_delimiter = ',', default_value = "box,cylinder,sphere,cone")]
    shapes: Vec<ShapeKind>,
    /// Standard deviation of Gaussian jitter on target points.
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Fraction of target points replaced by uniform outliers.
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
    /// "full" or a maximum angle in degrees.
    #[arg(long, default_value = "full")]
    rotation_range: RotationRange,
    /// Minimum object scale.
    #[arg(long, default_value_t = 1.0)]
    scale_min: f64,
    /// Maximum object scale.
    #[arg(long, default_value_t = 1.0)]
    scale_max: f64,
    /// Translations are uniform in [-e, e]³.
    #[arg(long, default_value_t = 0.5)]
    translation_extent: f64,
    /// Hidden point removal radius exponent.
    #[arg(long, default_value_t = 10.0)]
    hpr_gamma: f64,
    /// Camera distance in units of object scale.
    #[arg(long, default_value_t = 3.0)]
    view_distance: f64,
    /// Use the whole posed model as the target candidate set.
    #[arg(long)]
    full_view: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// JSON config file; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    synth: SynthFlags,
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Pairs per iteration.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Optimizer steps.
    #[arg(long, default_value_t = 2000)]
    iterations: usize,
    /// Sinkhorn temperature during training.
    #[arg(long = "train-lambda", default_value_t = DEFAULT_LAMBDA)]
    train_lambda: f64,
    /// Sinkhorn iterations during training.
    #[arg(long = "train-sinkhorn-iters", default_value_t = 20)]
    train_sinkhorn_iters: usize,
    /// Outlier bin score during training.
    #[arg(long = "train-alpha", default_value_t = DEFAULT_ALPHA)]
    train_alpha: f64,
    /// Weight initialization and batch sampling seed.
    #[arg(long = "train-seed", default_value_t = 0)]
    train_seed: u64,
    /// Checkpoint and validation period (0 = only at the end).
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    /// Ground-truth correspondence distance.
    #[arg(long, default_value_t = DEFAULT_GT_THRESHOLD)]
    gt_threshold: f64,
    /// Comma-separated layer widths.
    #[arg(long, value_delimiter = ',', default_value = "32,64,64")]
    widths: Vec<usize>,
    /// Neighbours per point in the edge graph.
    #[arg(long, default_value_t = DEFAULT_KNN_K)]
    knn_k: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config file; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out_model: PathBuf,
    /// JSONL training log [default: the model path with extension .log.jsonl]
    #[arg(long)]
    log: Option<PathBuf>,
    /// match-norm, per-instance or none.
    #[arg(long, default_value = "match-norm")]
    normalization: NormMode,
    /// Held-out dataset validated at every checkpoint.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Directory for periodic checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    eval: EvalFlags,
    #[command(flatten)]
    reg: RegFlags,
}

#[derive(Args, Debug)]
struct RegFlags {
    /// Sinkhorn temperature.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Sinkhorn iterations.
    #[arg(long, default_value_t = DEFAULT_SINKHORN_ITERS)]
    sinkhorn_iters: usize,
    /// Assignment mass needed to keep a match.
    #[arg(long, default_value_t = DEFAULT_MATCH_THRESHOLD)]
    tau: f64,
    /// Outlier bin score.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Refine the pose with ICP.
    #[arg(long)]
    icp: bool,
    /// ICP iteration cap.
    #[arg(long, default_value_t = DEFAULT_ICP_MAX_ITERS)]
    icp_max_iters: usize,
    /// ICP stops once the pose moves less than this.
    #[arg(long, default_value_t = DEFAULT_ICP_TOL)]
    icp_tol: f64,
    /// target-to-source or source-to-target.
    #[arg(long, default_value = "target-to-source", value_parser = parse_direction)]
    icp_direction: IcpDirection,
}

fn parse_direction(s: &str) -> Result<IcpDirection, String> {
    match s {
        "target-to-source" | "target_to_source" => Ok(IcpDirection::TargetToSource),
        "source-to-target" | "source_to_target" => Ok(IcpDirection::SourceToTarget),
        _ => Err(format!("expected target-to-source or source-to-target, got '{s}'")),
    }
}

#[derive(Args, Debug)]
struct RegisterArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Source (full model) PLY.
    #[arg(long)]
    source: PathBuf,
    /// Target (partial view) PLY.
    #[arg(long)]
    target: PathBuf,
    /// Ground-truth pose JSON, for error diagnostics.
    #[arg(long)]
    gt_pose: Option<PathBuf>,
    /// Write the result as JSON.
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[command(flatten)]
    reg: RegFlags,
}

#[derive(Args, Debug)]
struct EvalFlags {
    /// Threshold preset: metric or unitless.
    #[arg(long, default_value = "metric")]
    thresholds: String,
    /// Comma-separated rotation thresholds in degrees; overrides the preset.
    #[arg(long, value_delimiter = ',')]
    rot_thresholds: Option<Vec<f64>>,
    /// Comma-separated translation thresholds; overrides the preset.
    #[arg(long, value_delimiter = ',')]
    trans_thresholds: Option<Vec<f64>>,
    /// Distance under which a predicted match counts as a true inlier.
    #[arg(long, default_value_t = DEFAULT_INLIER_THRESHOLD)]
    inlier_threshold: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSON config file; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long, required_unless_present = "oracle")]
    model: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Write the report as JSON.
    #[arg(long)]
    json_out: Option<PathBuf>,
    /// Score the ground-truth pose and matches instead of a model.
    #[arg(long, hide = true)]
    oracle: bool,
    #[command(flatten)]
    eval: EvalFlags,
    #[command(flatten)]
    reg: RegFlags,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// JSON config file; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset directory.
    #[arg(long)]
    heldout: PathBuf,
    /// Write the report as JSON.
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    eval: EvalFlags,
    #[command(flatten)]
    reg: RegFlags,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    /// Comma-separated singular value gaps.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1,0.1,0.01,0.001")]
    gaps: Vec<f64>,
}

fn run() -> Result<(), CliError> {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            e.print().ok();
            return Err(CliError { code: code as u8, message: String::new() });
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::usage(e.to_string()))?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match cli.command {
        Command::Gen(a) => commands::gen(&a, sub),
        Command::Train(a) => commands::train(&a, sub),
        Command::Register(a) => commands::register(&a, sub),
        Command::Eval(a) => commands::eval(&a, sub),
        Command::Ablate(a) => commands::ablate(&a, sub),
        Command::ProbeSvd(a) => commands::probe_svd(&a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(e.code)
        }
    }
}

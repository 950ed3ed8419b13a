use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use nalgebra::Matrix3;
use serde::Serialize;

use matchreg::features::checkpoint;
use matchreg::features::NetParams;
use matchreg::geometry::io::read_ply;
use matchreg::geometry::Pose;
use matchreg::matching::MatchSet;
use matchreg::metrics::{count_true_inliers, rotation_error, MetricsReport, PoseErrors, Thresholds};
use matchreg::solver::{register as register_pair, RegisterOptions};
use matchreg::supervision::svd_gradient_probe;
use matchreg::synth::{generate_dataset, read_dataset, write_dataset, PairSample, SynthConfig};
use matchreg::training::{
    self, ablate as ablate_runs, evaluate, evaluate_oracle, EvalOptions, LogRecord, TrainConfig, TrainData,
    TrainObserver, Validation,
};

use crate::config::{self, set};
use crate::{AblateArgs, CliError, EvalArgs, EvalFlags, GenArgs, ProbeArgs, RegFlags, RegisterArgs, SynthFlags, TrainArgs, TrainFlags};

type CliResult = Result<(), CliError>;

pub fn apply_synth(f: &SynthFlags, m: &ArgMatches, c: &mut SynthConfig) {
    set(m, "m", &f.m, &mut c.m);
    set(m, "n", &f.n, &mut c.n);
    set(m, "shapes", &f.shapes, &mut c.shapes);
    set(m, "noise_sigma", &f.noise_sigma, &mut c.noise_sigma);
    set(m, "outlier_fraction", &f.outlier_fraction, &mut c.outlier_fraction);
    set(m, "rotation_range", &f.rotation_range, &mut c.rotation_range);
    set(m, "scale_min", &f.scale_min, &mut c.scale_range[0]);
    set(m, "scale_max", &f.scale_max, &mut c.scale_range[1]);
    set(m, "translation_extent", &f.translation_extent, &mut c.translation_extent);
    set(m, "hpr_gamma", &f.hpr_gamma, &mut c.hpr_gamma);
    set(m, "view_distance", &f.view_distance, &mut c.view_distance);
    set(m, "full_view", &f.full_view, &mut c.full_view);
}

pub fn apply_train(f: &TrainFlags, m: &ArgMatches, c: &mut TrainConfig) {
    set(m, "learning_rate", &f.learning_rate, &mut c.learning_rate);
    set(m, "batch_size", &f.batch_size, &mut c.batch_size);
    set(m, "iterations", &f.iterations, &mut c.iterations);
    set(m, "train_lambda", &f.train_lambda, &mut c.lambda);
    set(m, "train_sinkhorn_iters", &f.train_sinkhorn_iters, &mut c.sinkhorn_iters);
    set(m, "train_alpha", &f.train_alpha, &mut c.alpha);
    set(m, "train_seed", &f.train_seed, &mut c.seed);
    set(m, "checkpoint_every", &f.checkpoint_every, &mut c.checkpoint_every);
    set(m, "gt_threshold", &f.gt_threshold, &mut c.gt_threshold);
    set(m, "widths", &f.widths, &mut c.widths);
    set(m, "knn_k", &f.knn_k, &mut c.knn_k);
}

pub fn apply_register(f: &RegFlags, m: &ArgMatches, c: &mut RegisterOptions) {
    set(m, "lambda", &f.lambda, &mut c.lambda);
    set(m, "sinkhorn_iters", &f.sinkhorn_iters, &mut c.sinkhorn_iters);
    set(m, "tau", &f.tau, &mut c.tau);
    set(m, "alpha", &f.alpha, &mut c.alpha);
    set(m, "icp", &f.icp, &mut c.use_icp);
    set(m, "icp_max_iters", &f.icp_max_iters, &mut c.icp.max_iters);
    set(m, "icp_tol", &f.icp_tol, &mut c.icp.tol);
    set(m, "icp_direction", &f.icp_direction, &mut c.icp.direction);
}

fn apply_eval(f: &EvalFlags, m: &ArgMatches, c: &mut EvalOptions) -> CliResult {
    if config::explicit(m, "thresholds") {
        c.thresholds = Thresholds::preset(&f.thresholds).ok_or_else(|| {
            CliError::usage(format!("--thresholds: unknown preset '{}' (metric, unitless)", f.thresholds))
        })?;
    }
    if let Some(r) = &f.rot_thresholds {
        c.thresholds.rotation_deg = r.clone();
    }
    if let Some(t) = &f.trans_thresholds {
        c.thresholds.translation = t.clone();
    }
    set(m, "inlier_threshold", &f.inlier_threshold, &mut c.inlier_threshold);
    let all = c.thresholds.rotation_deg.iter().chain(&c.thresholds.translation);
    if c.thresholds.rotation_deg.is_empty() || c.thresholds.translation.is_empty() {
        return Err(CliError::usage("threshold lists must not be empty"));
    }
    if let Some(t) = all.into_iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(CliError::usage(format!("thresholds must be finite and ≥ 0, got {t}")));
    }
    Ok(())
}

fn eval_options(path: Option<&Path>, e: &EvalFlags, r: &RegFlags, m: &ArgMatches) -> Result<EvalOptions, CliError> {
    let mut opts = config::load(path)?.eval;
    apply_eval(e, m, &mut opts)?;
    apply_register(r, m, &mut opts.register);
    Ok(opts)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn load_pairs(dir: &Path) -> Result<Vec<PairSample>, CliError> {
    Ok(read_dataset(dir)?.samples.into_iter().map(|s| s.pair).collect())
}

fn load_model(path: &Path) -> Result<NetParams, CliError> {
    Ok(checkpoint::load(path)?)
}

pub fn gen(a: &GenArgs, m: &ArgMatches) -> CliResult {
    let mut cfg = config::load(a.config.as_deref())?.synth;
    apply_synth(&a.synth, m, &mut cfg);
    set(m, "seed", &a.seed, &mut cfg.seed);
    if a.count == 0 {
        return Err(CliError::usage("count must be ≥ 1"));
    }
    cfg.validate()?;
    let dataset = generate_dataset(&cfg, a.count)?;
    write_dataset(&a.out, &dataset)?;
    println!("wrote {} pairs to {}", dataset.len(), a.out.display());
    Ok(())
}

/// Streams log records to a JSONL file and stdout, and writes periodic
/// checkpoints.
struct CliObserver {
    log: BufWriter<File>,
    log_path: PathBuf,
    checkpoint_dir: Option<PathBuf>,
    print_every: usize,
}

impl CliObserver {
    fn io_err(&self, e: std::io::Error) -> matchreg::Error {
        matchreg::Error::Io { path: self.log_path.clone(), source: e }
    }
}

impl TrainObserver for CliObserver {
    fn record(&mut self, record: &LogRecord) -> matchreg::Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.log, "{line}").and_then(|_| self.log.flush()).map_err(|e| self.io_err(e))?;
        match record {
            LogRecord::Header { config, parameter_count, .. } => println!(
                "training {} parameters, normalization {}, {} iterations",
                parameter_count,
                config.normalization_mode.as_str(),
                config.iterations
            ),
            LogRecord::Iteration { iteration, loss, skipped, .. } if iteration % self.print_every == 0 => {
                println!("iter {iteration:>6}  loss {loss:.5}  skipped {skipped}")
            }
            LogRecord::Validation { iteration, mean_rotation_deg, mean_translation, mean_pred_matches, mean_true_inliers, .. } => println!(
                "val  {iteration:>6}  rot {mean_rotation_deg:.2}°  trans {mean_translation:.4}  pred {mean_pred_matches:.1}  true {mean_true_inliers:.1}"
            ),
            _ => {}
        }
        Ok(())
    }

    fn checkpoint(&mut self, iteration: usize, params: &NetParams) -> matchreg::Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| matchreg::Error::Io { path: dir.clone(), source: e })?;
            checkpoint::save(dir.join(format!("checkpoint_{iteration:06}.json")), params)?;
        }
        Ok(())
    }
}

pub fn train(a: &TrainArgs, m: &ArgMatches) -> CliResult {
    let file = config::load(a.config.as_deref())?;
    let mut cfg = file.train;
    apply_train(&a.train, m, &mut cfg);
    set(m, "normalization", &a.normalization, &mut cfg.normalization_mode);
    cfg.validate()?;
    let mut eval_opts = file.eval;
    apply_eval(&a.eval, m, &mut eval_opts)?;
    apply_register(&a.reg, m, &mut eval_opts.register);

    let pairs = load_pairs(&a.data)?;
    let val_pairs = a.val_data.as_deref().map(load_pairs).transpose()?;
    let validation = val_pairs.as_deref().map(|pairs| Validation { pairs, options: eval_opts.clone() });

    let log_path = a.log.clone().unwrap_or_else(|| a.out_model.with_extension("log.jsonl"));
    let log = File::create(&log_path).map_err(|e| CliError::io(format!("{}: {e}", log_path.display())))?;
    let mut observer = CliObserver {
        log: BufWriter::new(log),
        log_path: log_path.clone(),
        checkpoint_dir: a.checkpoint_dir.clone(),
        print_every: (cfg.iterations / 20).max(1),
    };
    let init = cfg.init_params()?;
    let (params, log) = training::train(&cfg, TrainData::Fixed(&pairs), init, validation.as_ref(), &mut observer)?;
    checkpoint::save(&a.out_model, &params)?;
    println!(
        "loss {:.5} -> {:.5}; model {}; log {}",
        log.initial_loss().unwrap_or(f64::NAN),
        log.final_loss().unwrap_or(f64::NAN),
        a.out_model.display(),
        log_path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct Diagnostics {
    /// Rotation angle of the estimated pose.
    rotation_angle_deg: f64,
    translation_norm: f64,
    rotation_error_deg: Option<f64>,
    translation_error: Option<f64>,
}

#[derive(Debug, Serialize)]
struct RegisterOutput<'a> {
    pose: Pose,
    matches: &'a MatchSet,
    predicted_match_count: usize,
    true_inlier_count: Option<usize>,
    icp_iterations_used: usize,
    converged: bool,
    diagnostics: Diagnostics,
}

pub fn register(a: &RegisterArgs, m: &ArgMatches) -> CliResult {
    let mut opts = RegisterOptions::default();
    apply_register(&a.reg, m, &mut opts);
    let params = load_model(&a.model)?;
    let x = read_ply(&a.source)?;
    let y = read_ply(&a.target)?;
    let gt: Option<Pose> = match &a.gt_pose {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?)
        }
    };
    let result = register_pair(&params, &x, &y, &opts)?;
    let errors = gt.as_ref().map(|g| PoseErrors::between(&result.pose, g));
    let out = RegisterOutput {
        pose: result.pose,
        matches: &result.matches,
        predicted_match_count: result.predicted_match_count,
        true_inlier_count: gt.map(|g| count_true_inliers(&result.matches, &x, &y, &g, matchreg::metrics::DEFAULT_INLIER_THRESHOLD)),
        icp_iterations_used: result.icp_iterations_used,
        converged: result.converged,
        diagnostics: Diagnostics {
            rotation_angle_deg: rotation_error(result.pose.rotation(), &Matrix3::identity()),
            translation_norm: result.pose.translation().norm(),
            rotation_error_deg: errors.map(|e| e.rotation_deg),
            translation_error: errors.map(|e| e.translation),
        },
    };
    let r = result.pose.rotation();
    let t = result.pose.translation();
    println!("rotation");
    for i in 0..3 {
        println!("  {:>12.8} {:>12.8} {:>12.8}", r[(i, 0)], r[(i, 1)], r[(i, 2)]);
    }
    println!("translation {:.8} {:.8} {:.8}", t.x, t.y, t.z);
    println!("rotation angle  {:.4}°", out.diagnostics.rotation_angle_deg);
    println!("matches         {}", out.predicted_match_count);
    if let Some(n) = out.true_inlier_count {
        println!("true inliers    {n}");
    }
    if let Some(e) = errors {
        println!("rotation error  {:.4}°", e.rotation_deg);
        println!("translation err {:.6}", e.translation);
    }
    println!("icp iterations  {}", out.icp_iterations_used);
    println!("converged       {}", out.converged);
    if let Some(p) = &a.json_out {
        write_json(p, &out)?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs, m: &ArgMatches) -> CliResult {
    let opts = eval_options(a.config.as_deref(), &a.eval, &a.reg, m)?;
    let pairs = load_pairs(&a.data)?;
    if pairs.is_empty() {
        return Err(CliError::usage(format!("dataset {} is empty", a.data.display())));
    }
    let report: MetricsReport = if a.oracle {
        evaluate_oracle(&pairs, &opts)?
    } else {
        let path = a.model.as_deref().expect("clap requires --model without --oracle");
        evaluate(&load_model(path)?, &pairs, &opts)?
    };
    print!("{}", report.to_table());
    if let Some(p) = &a.json_out {
        write_json(p, &report)?;
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs, m: &ArgMatches) -> CliResult {
    let file = config::load(a.config.as_deref())?;
    let mut base = file.train;
    apply_train(&a.train, m, &mut base);
    let mut opts = file.eval;
    apply_eval(&a.eval, m, &mut opts)?;
    apply_register(&a.reg, m, &mut opts.register);
    let mn = TrainConfig { normalization_mode: matchreg::features::NormMode::MatchNorm, ..base.clone() };
    let pin = TrainConfig { normalization_mode: matchreg::features::NormMode::PerInstanceNorm, ..base };
    mn.validate()?;
    let pairs = load_pairs(&a.data)?;
    let heldout = load_pairs(&a.heldout)?;
    if heldout.is_empty() {
        return Err(CliError::usage(format!("dataset {} is empty", a.heldout.display())));
    }
    let report = ablate_runs(&mn, &pin, TrainData::Fixed(&pairs), &heldout, &opts)?;
    println!(
        "{:<20}{:>10}{:>10}{:>10}{:>10}{:>10}{:>8}",
        "normalization", "loss0", "loss1", "pred", "true", "prec", "ADD"
    );
    for r in &report.runs {
        println!(
            "{:<20}{:>10.4}{:>10.4}{:>10.2}{:>10.2}{:>10.3}{:>8.3}",
            r.normalization.as_str(),
            r.initial_loss,
            r.final_loss,
            r.mean_pred_matches,
            r.mean_true_inliers,
            r.inlier_precision,
            r.add_rate
        );
    }
    for r in &report.runs {
        let cells: Vec<String> = r.rotation_map.iter().map(|(k, v)| format!("{k}°: {v:.3}")).collect();
        println!("{:<20}{}", r.normalization.as_str(), cells.join("  "));
    }
    println!("pred match ratio  {:.3}", report.pred_match_ratio);
    println!("true inlier ratio {:.3}", report.true_inlier_ratio);
    if let Some(p) = &a.json_out {
        write_json(p, &report)?;
    }
    Ok(())
}

pub fn probe_svd(a: &ProbeArgs) -> CliResult {
    if let Some(g) = a.gaps.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(CliError::usage(format!("--gaps: every gap must be > 0, got {g}")));
    }
    let rows = a.gaps.iter().map(|&g| svd_gradient_probe(g)).collect::<Result<Vec<_>, _>>()?;
    let mut out = String::from("sigma_gap\tgradient_magnitude\trotation_gradient\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6e}\t{:.6e}\n", r.sigma_gap, r.factor_gradient, r.rotation_gradient));
    }
    print!("{out}");
    Ok(())
}

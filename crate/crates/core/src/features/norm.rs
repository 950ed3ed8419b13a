//! Match Normalization and batch normalization, forward and backward.
//!
//! Feature matrices are C×M: one column per point, one row per channel.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::FeatureTensor;
use crate::error::{Error, Result};

/// Floor on the shared scale.
pub const MN_EPS: f64 = 1e-8;
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the previous running statistic kept at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Which instance-level normalization precedes batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Separate centering, one scale taken from the source activations.
    MatchNorm,
    /// Separate centering, each cloud scaled by its own maximum.
    PerInstanceNorm,
    /// Batch normalization only.
    None,
}

impl NormMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormMode::MatchNorm => "match_norm",
            NormMode::PerInstanceNorm => "per_instance_norm",
            NormMode::None => "none",
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match_norm" | "match-norm" | "mn" => Ok(NormMode::MatchNorm),
            "per_instance_norm" | "per-instance-norm" | "per-instance" | "per_instance" => {
                Ok(NormMode::PerInstanceNorm)
            }
            "none" => Ok(NormMode::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalization mode '{other}' (expected match_norm, per_instance_norm or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Scale and its subgradient location: `index` is the column-major flat
/// position of the max-magnitude entry, `None` when the ε floor is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub value: f64,
    pub index: Option<usize>,
}

/// Per-pair statistics of one instance-normalization step.
#[derive(Debug, Clone, PartialEq)]
pub struct PairNormStats {
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
    pub beta_x: Scale,
    pub beta_y: Scale,
}

/// Statistics returned by [`match_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatchNormStats {
    pub mu_x: DVector<f64>,
    pub mu_y: DVector<f64>,
    pub beta: f64,
}

fn channel_means(o: &DMatrix<f64>) -> DVector<f64> {
    o.column_mean()
}

/// max |o| over all entries; first occurrence in column-major order wins ties.
pub(crate) fn max_abs_scale(o: &DMatrix<f64>) -> Scale {
    let mut best = -1.0;
    let mut idx = 0;
    for (k, v) in o.iter().enumerate() {
        let a = v.abs();
        if a > best {
            best = a;
            idx = k;
        }
    }
    if best >= MN_EPS {
        Scale {
            value: best,
            index: Some(idx),
        }
    } else {
        Scale {
            value: MN_EPS,
            index: None,
        }
    }
}

fn center_scale(o: &DMatrix<f64>, mu: &DVector<f64>, beta: f64) -> DMatrix<f64> {
    let mut out = o.clone();
    for mut col in out.column_iter_mut() {
        col -= mu;
        col /= beta;
    }
    out
}

/// Match Normalization of a source/target activation pair: each cloud is
/// centered by its own per-channel mean and both are divided by the largest
/// raw source magnitude.
pub fn match_normalize(
    o_x: &FeatureTensor,
    o_y: &FeatureTensor,
) -> Result<(FeatureTensor, FeatureTensor, MatchNormStats)> {
    check_channels(o_x.matrix(), o_y.matrix())?;
    let (x, y, st) = normalize_pair(o_x.matrix(), o_y.matrix(), NormMode::MatchNorm);
    Ok((
        FeatureTensor::from_matrix_unchecked(x),
        FeatureTensor::from_matrix_unchecked(y),
        MatchNormStats {
            mu_x: st.mu_x,
            mu_y: st.mu_y,
            beta: st.beta_x.value,
        },
    ))
}

pub(crate) fn check_channels(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(Error::ChannelMismatch {
            left: a.nrows(),
            right: b.nrows(),
        });
    }
    Ok(())
}

/// Instance normalization of a pair under `mode`. For `NormMode::None` the
/// inputs pass through with zero means and unit scales.
pub(crate) fn normalize_pair(
    o_x: &DMatrix<f64>,
    o_y: &DMatrix<f64>,
    mode: NormMode,
) -> (DMatrix<f64>, DMatrix<f64>, PairNormStats) {
    let c = o_x.nrows();
    match mode {
        NormMode::None => (
            o_x.clone(),
            o_y.clone(),
            PairNormStats {
                mu_x: DVector::zeros(c),
                mu_y: DVector::zeros(c),
                beta_x: Scale {
                    value: 1.0,
                    index: None,
                },
                beta_y: Scale {
                    value: 1.0,
                    index: None,
                },
            },
        ),
        NormMode::MatchNorm | NormMode::PerInstanceNorm => {
            let mu_x = channel_means(o_x);
            let mu_y = channel_means(o_y);
            let beta_x = max_abs_scale(o_x);
            let beta_y = if mode == NormMode::MatchNorm {
                beta_x
            } else {
                max_abs_scale(o_y)
            };
            let x = center_scale(o_x, &mu_x, beta_x.value);
            let y = center_scale(o_y, &mu_y, beta_y.value);
            (
                x,
                y,
                PairNormStats {
                    mu_x,
                    mu_y,
                    beta_x,
                    beta_y,
                },
            )
        }
    }
}

/// Gradient of the centering-and-scaling map for one cloud, ignoring the
/// scale path: (g − mean(g)) / β.
fn center_scale_backward(g: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let mean = g.column_mean();
    let mut out = g.clone();
    for mut col in out.column_iter_mut() {
        col -= &mean;
        col /= beta;
    }
    out
}

/// Backward pass of [`normalize_pair`]. `x_hat`/`y_hat` are its outputs and
/// `o_x`/`o_y` its raw inputs (for the sign at the max location).
pub(crate) fn normalize_pair_backward(
    g_x: &DMatrix<f64>,
    g_y: &DMatrix<f64>,
    o_x: &DMatrix<f64>,
    o_y: &DMatrix<f64>,
    x_hat: &DMatrix<f64>,
    y_hat: &DMatrix<f64>,
    stats: &PairNormStats,
    mode: NormMode,
) -> (DMatrix<f64>, DMatrix<f64>) {
    match mode {
        NormMode::None => (g_x.clone(), g_y.clone()),
        NormMode::MatchNorm | NormMode::PerInstanceNorm => {
            let bx = stats.beta_x.value;
            let by = stats.beta_y.value;
            let mut gx = center_scale_backward(g_x, bx);
            let mut gy = center_scale_backward(g_y, by);
            // ∂ô/∂β = −ô/β
            let dbx = -g_x.dot(x_hat) / bx;
            let dby = -g_y.dot(y_hat) / by;
            if mode == NormMode::MatchNorm {
                if let Some(k) = stats.beta_x.index {
                    gx[k] += (dbx + dby) * o_x[k].signum();
                }
            } else {
                if let Some(k) = stats.beta_x.index {
                    gx[k] += dbx * o_x[k].signum();
                }
                if let Some(k) = stats.beta_y.index {
                    gy[k] += dby * o_y[k].signum();
                }
            }
            (gx, gy)
        }
    }
}

/// Learnable affine and running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: DVector::from_element(channels, 1.0),
            beta: DVector::zeros(channels),
            running_mean: DVector::zeros(channels),
            running_var: DVector::from_element(channels, 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Statistics used by one batch-normalization call.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: DVector<f64>,
    /// Biased variance used for normalization.
    pub var: DVector<f64>,
    /// Unbiased variance, fed into the running estimate.
    pub var_unbiased: DVector<f64>,
    pub count: usize,
}

pub struct BatchNormOutput {
    /// Affine-transformed outputs, one per input.
    pub outputs: Vec<DMatrix<f64>>,
    /// Normalized values before the affine step.
    pub normalized: Vec<DMatrix<f64>>,
    pub stats: BnStats,
    /// Running statistics after this call (unchanged in eval mode).
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
}

/// Batch normalization over every point of every instance in `inputs`.
///
/// Train mode normalizes with the batch statistics and returns updated
/// running statistics (momentum 0.9); eval mode uses the running statistics.
pub fn batch_normalize(inputs: &[&DMatrix<f64>], bn: &BnParams, mode: Mode) -> Result<BatchNormOutput> {
    let c = bn.channels();
    for x in inputs {
        if x.nrows() != c {
            return Err(Error::ChannelMismatch {
                left: x.nrows(),
                right: c,
            });
        }
    }
    let count: usize = inputs.iter().map(|x| x.ncols()).sum();
    let (mean, var, var_unbiased) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::EmptyBatch);
            }
            let mut sum = DVector::zeros(c);
            for x in inputs {
                for col in x.column_iter() {
                    sum += col;
                }
            }
            let mean = sum / count as f64;
            let mut sq = DVector::zeros(c);
            for x in inputs {
                for col in x.column_iter() {
                    let d = col - &mean;
                    sq += d.component_mul(&d);
                }
            }
            let var = &sq / count as f64;
            let var_unbiased = sq / (count - 1) as f64;
            (mean, var, var_unbiased)
        }
        Mode::Eval => {
            if count == 0 {
                return Err(Error::EmptyBatch);
            }
            (
                bn.running_mean.clone(),
                bn.running_var.clone(),
                bn.running_var.clone(),
            )
        }
    };
    let inv_std = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut normalized = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut n = (*x).clone();
        for mut col in n.column_iter_mut() {
            col -= &mean;
            col.component_mul_assign(&inv_std);
        }
        let mut y = n.clone();
        for mut col in y.column_iter_mut() {
            col.component_mul_assign(&bn.gamma);
            col += &bn.beta;
        }
        normalized.push(n);
        outputs.push(y);
    }
    let (running_mean, running_var) = match mode {
        Mode::Train => (
            &bn.running_mean * BN_MOMENTUM + &mean * (1.0 - BN_MOMENTUM),
            &bn.running_var * BN_MOMENTUM + &var_unbiased * (1.0 - BN_MOMENTUM),
        ),
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    Ok(BatchNormOutput {
        outputs,
        normalized,
        stats: BnStats {
            mean,
            var,
            var_unbiased,
            count,
        },
        running_mean,
        running_var,
    })
}

/// Gradients of one batch-normalization call.
pub(crate) struct BnBackward {
    pub inputs: Vec<DMatrix<f64>>,
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
}

pub(crate) fn batch_normalize_backward(
    grads: &[&DMatrix<f64>],
    normalized: &[DMatrix<f64>],
    stats: &BnStats,
    bn: &BnParams,
    mode: Mode,
) -> BnBackward {
    let c = bn.channels();
    let mut g_gamma = DVector::zeros(c);
    let mut g_beta = DVector::zeros(c);
    for (g, n) in grads.iter().zip(normalized) {
        for (gc, nc) in g.column_iter().zip(n.column_iter()) {
            g_gamma += gc.component_mul(&nc);
            g_beta += gc;
        }
    }
    let inv_std = stats.var.map(|v| 1.0 / (v + BN_EPS).sqrt());
    let scale = bn.gamma.component_mul(&inv_std);
    let inputs = match mode {
        Mode::Eval => grads
            .iter()
            .map(|g| {
                let mut out = (*g).clone();
                for mut col in out.column_iter_mut() {
                    col.component_mul_assign(&scale);
                }
                out
            })
            .collect(),
        Mode::Train => {
            // dx = γ/σ · (g − mean(g) − n·mean(g·n)), means over the whole batch.
            let cnt = stats.count as f64;
            let mean_g = &g_beta / cnt;
            let mean_gn = &g_gamma / cnt;
            grads
                .iter()
                .zip(normalized)
                .map(|(g, n)| {
                    let mut out = (*g).clone();
                    for (mut col, nc) in out.column_iter_mut().zip(n.column_iter()) {
                        col -= &mean_g;
                        col -= nc.component_mul(&mean_gn);
                        col.component_mul_assign(&scale);
                    }
                    out
                })
                .collect()
        }
    };
    BnBackward {
        inputs,
        gamma: g_gamma,
        beta: g_beta,
    }
}

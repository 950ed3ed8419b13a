use nalgebra::{DMatrix, DVector};

use super::knn::{knn_indices, Neighbors};
use super::norm::{
    batch_normalize, batch_normalize_backward, check_channels, normalize_pair, normalize_pair_backward,
    BnStats, Mode, PairNormStats,
};
use super::{FeatureTensor, NetParams};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Activations of one block for both clouds, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub edge_x: DMatrix<f64>,
    pub edge_y: DMatrix<f64>,
    /// Neighbor achieving the max for each (channel, point), column-major.
    pub arg_x: Vec<usize>,
    pub arg_y: Vec<usize>,
    /// Raw linear outputs.
    pub o_x: DMatrix<f64>,
    pub o_y: DMatrix<f64>,
    /// Instance-normalized activations (batch-norm inputs).
    pub xhat: DMatrix<f64>,
    pub yhat: DMatrix<f64>,
    pub norm_stats: PairNormStats,
    pub bn_normalized: Vec<DMatrix<f64>>,
    pub bn_stats: BnStats,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
    /// Batch-norm outputs before ReLU.
    pub z_x: DMatrix<f64>,
    pub z_y: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: Mode,
    pub knn_x: Neighbors,
    pub knn_y: Neighbors,
    pub layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn points(&self) -> (usize, usize) {
        (self.knn_x.len(), self.knn_y.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub bn_gamma: DVector<f64>,
    pub bn_beta: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
    /// Gradient with respect to the input coordinates, 3×M and 3×N.
    pub input_x: DMatrix<f64>,
    pub input_y: DMatrix<f64>,
}

impl NetGrads {
    pub fn zeros_like(params: &NetParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                    bn_gamma: DVector::zeros(l.bias.len()),
                    bn_beta: DVector::zeros(l.bias.len()),
                })
                .collect(),
            input_x: DMatrix::zeros(3, 0),
            input_y: DMatrix::zeros(3, 0),
        }
    }

    /// Parameter gradients in the canonical flat order of
    /// [`NetParams::for_each_param_mut`]; input gradients are excluded.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.weight
                    .iter()
                    .chain(l.bias.iter())
                    .chain(l.bn_gamma.iter())
                    .chain(l.bn_beta.iter())
                    .copied()
            })
            .collect()
    }

    /// Accumulates `scale · other` into the parameter gradients.
    pub fn add_scaled(&mut self, other: &NetGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight * scale;
            a.bias += &b.bias * scale;
            a.bn_gamma += &b.bn_gamma * scale;
            a.bn_beta += &b.bn_beta * scale;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

impl NetParams {
    /// Visits every trainable scalar together with its gradient and flat index.
    pub fn for_each_param_mut(&mut self, grads: &NetGrads, mut f: impl FnMut(usize, &mut f64, f64)) {
        let mut k = 0;
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            let pairs = l
                .weight
                .iter_mut()
                .zip(g.weight.iter())
                .chain(l.bias.iter_mut().zip(g.bias.iter()))
                .chain(l.bn.gamma.iter_mut().zip(g.bn_gamma.iter()))
                .chain(l.bn.beta.iter_mut().zip(g.bn_beta.iter()));
            for (p, &gv) in pairs {
                f(k, p, gv);
                k += 1;
            }
        }
    }

    /// Folds the batch statistics of a train-mode forward pass into the
    /// running estimates.
    pub fn absorb_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            if cache.mode == Mode::Train {
                layer.bn.running_mean = lc.running_mean.clone();
                layer.bn.running_var = lc.running_var.clone();
            }
        }
    }
}

fn coords_matrix(pc: &PointCloud) -> DMatrix<f64> {
    DMatrix::from_fn(3, pc.len(), |r, c| pc.points()[c][r])
}

/// [f_i ; max_j (f_j − f_i)] for every point, with the argmax neighbor per
/// entry (first neighbor in table order wins ties).
fn edge_features(f: &DMatrix<f64>, nbrs: &Neighbors) -> (DMatrix<f64>, Vec<usize>) {
    let (c, m) = f.shape();
    let mut edge = DMatrix::zeros(2 * c, m);
    let mut arg = vec![0usize; c * m];
    for i in 0..m {
        let fi = f.column(i);
        let row = nbrs.row(i);
        let mut best: Vec<f64> = vec![f64::NEG_INFINITY; c];
        let a = &mut arg[i * c..(i + 1) * c];
        for &j in row {
            let fj = f.column(j);
            for ch in 0..c {
                let d = fj[ch] - fi[ch];
                if d > best[ch] {
                    best[ch] = d;
                    a[ch] = j;
                }
            }
        }
        let mut col = edge.column_mut(i);
        for ch in 0..c {
            col[ch] = fi[ch];
            col[c + ch] = best[ch];
        }
    }
    (edge, arg)
}

fn edge_features_backward(g_edge: &DMatrix<f64>, arg: &[usize]) -> DMatrix<f64> {
    let c = g_edge.nrows() / 2;
    let m = g_edge.ncols();
    let mut g = g_edge.rows(0, c).into_owned();
    for i in 0..m {
        for ch in 0..c {
            let gv = g_edge[(c + ch, i)];
            if gv != 0.0 {
                g[(ch, arg[i * c + ch])] += gv;
                g[(ch, i)] -= gv;
            }
        }
    }
    g
}

fn linear(w: &DMatrix<f64>, b: &DVector<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut o = w * x;
    for mut col in o.column_iter_mut() {
        col += b;
    }
    o
}

/// Runs the feature network on a source/target pair.
///
/// Each block builds edge features over a static k-NN graph of the input
/// coordinates, applies the linear map, normalizes the pair (Match
/// Normalization shares the source scale with the target), batch-normalizes
/// both clouds jointly and applies ReLU.
pub fn extract_features(
    params: &NetParams,
    x: &PointCloud,
    y: &PointCloud,
    mode: Mode,
) -> Result<(FeatureTensor, FeatureTensor, ForwardCache)> {
    params.validate()?;
    let knn_x = knn_indices(x, params.knn_k)?;
    let knn_y = knn_indices(y, params.knn_k)?;
    let mut fx = coords_matrix(x);
    let mut fy = coords_matrix(y);
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (edge_x, arg_x) = edge_features(&fx, &knn_x);
        let (edge_y, arg_y) = edge_features(&fy, &knn_y);
        let o_x = linear(&lp.weight, &lp.bias, &edge_x);
        let o_y = linear(&lp.weight, &lp.bias, &edge_y);
        let (xhat, yhat, norm_stats) = normalize_pair(&o_x, &o_y, params.normalization);
        let bn = batch_normalize(&[&xhat, &yhat], &lp.bn, mode)?;
        let mut outs = bn.outputs.into_iter();
        let z_x = outs.next().expect("two outputs");
        let z_y = outs.next().expect("two outputs");
        fx = z_x.map(|v| v.max(0.0));
        fy = z_y.map(|v| v.max(0.0));
        layers.push(LayerCache {
            edge_x,
            edge_y,
            arg_x,
            arg_y,
            o_x,
            o_y,
            xhat,
            yhat,
            norm_stats,
            bn_normalized: bn.normalized,
            bn_stats: bn.stats,
            running_mean: bn.running_mean,
            running_var: bn.running_var,
            z_x,
            z_y,
        });
    }
    Ok((
        FeatureTensor::from_matrix_unchecked(fx),
        FeatureTensor::from_matrix_unchecked(fy),
        ForwardCache {
            mode,
            knn_x,
            knn_y,
            layers,
        },
    ))
}

/// Analytic gradients of a scalar loss through [`extract_features`], given
/// the upstream gradients with respect to both descriptor matrices.
pub fn extract_features_backward(
    params: &NetParams,
    cache: &ForwardCache,
    g_fx: &DMatrix<f64>,
    g_fy: &DMatrix<f64>,
) -> Result<NetGrads> {
    if cache.layers.len() != params.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "cache has {} layers, network has {}",
            cache.layers.len(),
            params.layers.len()
        )));
    }
    let last = cache.layers.last().ok_or_else(|| Error::ShapeMismatch("empty cache".into()))?;
    if g_fx.shape() != last.z_x.shape() || g_fy.shape() != last.z_y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradients {:?}/{:?} do not match outputs {:?}/{:?}",
            g_fx.shape(),
            g_fy.shape(),
            last.z_x.shape(),
            last.z_y.shape()
        )));
    }
    check_channels(g_fx, g_fy)?;

    let mut gx = g_fx.clone();
    let mut gy = g_fy.clone();
    let mut layer_grads = Vec::with_capacity(params.layers.len());
    for (lp, lc) in params.layers.iter().zip(&cache.layers).rev() {
        // ReLU
        gx.zip_apply(&lc.z_x, |g, z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        gy.zip_apply(&lc.z_y, |g, z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        let bn = batch_normalize_backward(&[&gx, &gy], &lc.bn_normalized, &lc.bn_stats, &lp.bn, cache.mode);
        let mut inputs = bn.inputs.into_iter();
        let g_xhat = inputs.next().expect("two inputs");
        let g_yhat = inputs.next().expect("two inputs");
        let (g_ox, g_oy) = normalize_pair_backward(
            &g_xhat,
            &g_yhat,
            &lc.o_x,
            &lc.o_y,
            &lc.xhat,
            &lc.yhat,
            &lc.norm_stats,
            params.normalization,
        );
        let weight = &g_ox * lc.edge_x.transpose() + &g_oy * lc.edge_y.transpose();
        let bias = g_ox.column_sum() + g_oy.column_sum();
        let wt = lp.weight.transpose();
        gx = edge_features_backward(&(&wt * &g_ox), &lc.arg_x);
        gy = edge_features_backward(&(&wt * &g_oy), &lc.arg_y);
        layer_grads.push(LayerGrads {
            weight,
            bias,
            bn_gamma: bn.gamma,
            bn_beta: bn.beta,
        });
    }
    layer_grads.reverse();
    Ok(NetGrads {
        layers: layer_grads,
        input_x: gx,
        input_y: gy,
    })
}

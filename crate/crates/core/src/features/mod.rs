//! Per-point descriptors from a small edge-feature network with Match
//! Normalization in every block.

pub mod checkpoint;
mod knn;
mod net;
pub mod norm;

pub use knn::{knn_indices, Neighbors};
pub use net::{extract_features, extract_features_backward, ForwardCache, LayerCache, LayerGrads, NetGrads};
pub use norm::{batch_normalize, match_normalize, BnParams, MatchNormStats, Mode, NormMode};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// C×M descriptor matrix, one column per point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor(DMatrix<f64>);

impl FeatureTensor {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature tensor must be non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_matrix_unchecked(values: DMatrix<f64>) -> Self {
        Self(values)
    }

    pub fn channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn points(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// One edge-feature block: linear map over [f_i ; max_j (f_j − f_i)],
/// followed by instance normalization, batch normalization and ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// C_out × C_in, where C_in is twice the previous block's width.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub bn: BnParams,
}

impl LayerParams {
    pub fn c_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn c_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// Default block widths: 6 → 32 → 64 → 64.
pub const DEFAULT_WIDTHS: [usize; 3] = [32, 64, 64];
pub const DEFAULT_KNN_K: usize = 10;
/// Edge features of raw coordinates: [x_i ; x_j − x_i].
pub const INPUT_WIDTH: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
    pub knn_k: usize,
    pub normalization: NormMode,
}

impl NetParams {
    /// He-initialized weights, zero biases, identity batch normalization.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        knn_k: usize,
        normalization: NormMode,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be non-empty and positive".into()));
        }
        if knn_k == 0 {
            return Err(Error::InvalidArgument("knn_k must be ≥ 1".into()));
        }
        let mut c_in = INPUT_WIDTH;
        let mut layers = Vec::with_capacity(widths.len());
        for &c_out in widths {
            let normal = Normal::new(0.0, (2.0 / c_in as f64).sqrt()).expect("finite std");
            layers.push(LayerParams {
                weight: DMatrix::from_fn(c_out, c_in, |_, _| normal.sample(rng)),
                bias: DVector::zeros(c_out),
                bn: BnParams::new(c_out),
            });
            c_in = 2 * c_out;
        }
        let params = Self {
            layers,
            knn_k,
            normalization,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::ShapeMismatch("network has no layers".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::ShapeMismatch("knn_k must be ≥ 1".into()));
        }
        let mut expect_in = INPUT_WIDTH;
        for (l, layer) in self.layers.iter().enumerate() {
            let c = layer.c_out();
            if layer.c_in() != expect_in {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} expects input width {expect_in}, weight has {}",
                    layer.c_in()
                )));
            }
            let bn = &layer.bn;
            if layer.bias.len() != c
                || bn.gamma.len() != c
                || bn.beta.len() != c
                || bn.running_mean.len() != c
                || bn.running_var.len() != c
            {
                return Err(Error::ShapeMismatch(format!("layer {l} vector lengths differ from {c}")));
            }
            if !bn.running_var.iter().all(|v| *v > 0.0) {
                return Err(Error::ShapeMismatch(format!("layer {l} running variance must be > 0")));
            }
            let finite = layer
                .weight
                .iter()
                .chain(layer.bias.iter())
                .chain(bn.gamma.iter())
                .chain(bn.beta.iter())
                .chain(bn.running_mean.iter())
                .chain(bn.running_var.iter())
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::ShapeMismatch(format!("layer {l} has non-finite parameters")));
            }
            expect_in = 2 * c;
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.c_out())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len() + 2 * l.bn.gamma.len())
            .sum()
    }

    /// Copy with the same weights but a different normalization stage.
    pub fn with_normalization(&self, normalization: NormMode) -> Self {
        Self {
            normalization,
            ..self.clone()
        }
    }
}

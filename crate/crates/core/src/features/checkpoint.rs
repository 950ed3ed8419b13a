//! JSON checkpoint of a [`NetParams`] snapshot.
//!
//! ```json
//! {
//!   "format": "matchreg-checkpoint",
//!   "version": 1,
//!   "knn_k": 10,
//!   "normalization": "match_norm",
//!   "layers": [
//!     { "c_out": 32, "c_in": 6, "weight": [/* c_out*c_in, row-major */],
//!       "bias": [..], "bn_gamma": [..], "bn_beta": [..],
//!       "bn_running_mean": [..], "bn_running_var": [..] }
//!   ]
//! }
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BnParams, LayerParams, NetParams, NormMode};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "matchreg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    c_out: usize,
    c_in: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    bn_gamma: Vec<f64>,
    bn_beta: Vec<f64>,
    bn_running_mean: Vec<f64>,
    bn_running_var: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    knn_k: usize,
    normalization: NormMode,
    layers: Vec<LayerRecord>,
}

pub fn to_json(params: &NetParams) -> String {
    let rec = CheckpointRecord {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        knn_k: params.knn_k,
        normalization: params.normalization,
        layers: params
            .layers
            .iter()
            .map(|l| LayerRecord {
                c_out: l.c_out(),
                c_in: l.c_in(),
                weight: l.weight.transpose().iter().copied().collect(),
                bias: l.bias.iter().copied().collect(),
                bn_gamma: l.bn.gamma.iter().copied().collect(),
                bn_beta: l.bn.beta.iter().copied().collect(),
                bn_running_mean: l.bn.running_mean.iter().copied().collect(),
                bn_running_var: l.bn.running_var.iter().copied().collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&rec).expect("checkpoint serializes")
}

pub fn from_json(text: &str, path: &Path) -> Result<NetParams> {
    let rec: CheckpointRecord = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
    if rec.format != CHECKPOINT_FORMAT {
        return Err(Error::CorruptDataset(format!(
            "{}: not a checkpoint (format '{}')",
            path.display(),
            rec.format
        )));
    }
    if rec.version != CHECKPOINT_VERSION {
        return Err(Error::CorruptDataset(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            rec.version
        )));
    }
    let mut layers = Vec::with_capacity(rec.layers.len());
    for (i, l) in rec.layers.into_iter().enumerate() {
        if l.weight.len() != l.c_out * l.c_in {
            return Err(Error::ShapeMismatch(format!(
                "layer {i}: weight has {} values, declared {}x{}",
                l.weight.len(),
                l.c_out,
                l.c_in
            )));
        }
        layers.push(LayerParams {
            weight: DMatrix::from_row_slice(l.c_out, l.c_in, &l.weight),
            bias: DVector::from_vec(l.bias),
            bn: BnParams {
                gamma: DVector::from_vec(l.bn_gamma),
                beta: DVector::from_vec(l.bn_beta),
                running_mean: DVector::from_vec(l.bn_running_mean),
                running_var: DVector::from_vec(l.bn_running_var),
            },
        });
    }
    let params = NetParams {
        layers,
        knn_k: rec.knn_k,
        normalization: rec.normalization,
    };
    params.validate()?;
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &NetParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_json(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<NetParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, path)
}

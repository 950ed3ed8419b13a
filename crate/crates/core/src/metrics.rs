//! Pose errors, ADD, threshold accuracy tables and match diagnostics.

use std::fmt;

use nalgebra::{Matrix3, Vector3};
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose};
use crate::matching::MatchSet;

pub const DEFAULT_INLIER_THRESHOLD: f64 = 0.02;
/// ADD passes when the mean distance is below this fraction of the diameter.
pub const ADD_DIAMETER_FRACTION: f64 = 0.1;

/// Angle of R̂ᵀR_gt in degrees, in [0, 180].
pub fn rotation_error(r_hat: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let c = ((r_hat.transpose() * r_gt).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn translation_error(t_hat: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t_hat - t_gt).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub rotation_deg: f64,
    pub translation: f64,
}

impl PoseErrors {
    pub fn between(estimate: &Pose, truth: &Pose) -> Self {
        Self {
            rotation_deg: rotation_error(estimate.rotation(), truth.rotation()),
            translation: translation_error(estimate.translation(), truth.translation()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AddScore {
    pub mean_distance: f64,
    pub pass: bool,
}

/// Mean distance between model points under the two poses.
pub fn add_score(model: &PointCloud, pose_hat: &Pose, pose_gt: &Pose, diameter: f64) -> Result<AddScore> {
    if !(diameter > 0.0) {
        return Err(Error::InvalidArgument(format!("diameter must be > 0, got {diameter}")));
    }
    if model.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sum: f64 = model
        .iter()
        .map(|p| (pose_hat.transform_point(p) - pose_gt.transform_point(p)).norm())
        .sum();
    let mean_distance = sum / model.len() as f64;
    Ok(AddScore {
        mean_distance,
        pass: mean_distance < ADD_DIAMETER_FRACTION * diameter,
    })
}

/// Matches whose endpoints lie within `inlier_thresh` under the true pose.
pub fn count_true_inliers(matches: &MatchSet, x: &PointCloud, y: &PointCloud, t_gt: &Pose, inlier_thresh: f64) -> usize {
    matches
        .iter()
        .filter(|m| {
            let (Some(p), Some(q)) = (x.points().get(m.source), y.points().get(m.target)) else {
                return false;
            };
            (t_gt.transform_point(p) - q).norm() <= inlier_thresh
        })
        .count()
}

/// Rotation (degrees) and translation threshold lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub rotation_deg: Vec<f64>,
    pub translation: Vec<f64>,
}

impl Thresholds {
    /// 5/10/20 degrees and 1/2/5 cm.
    pub fn metric() -> Self {
        Self {
            rotation_deg: vec![5.0, 10.0, 20.0],
            translation: vec![0.01, 0.02, 0.05],
        }
    }

    /// Finer sweep for normalized, unitless objects.
    pub fn unitless() -> Self {
        Self {
            rotation_deg: vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            translation: vec![0.001, 0.005, 0.01, 0.05, 0.1, 0.5],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "metric" => Some(Self::metric()),
            "unitless" => Some(Self::unitless()),
            _ => None,
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self::metric()
    }
}

/// Threshold → accuracy fraction, kept in the configured order and
/// serialized as a JSON object keyed by the threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ThresholdTable(pub Vec<(f64, f64)>);

impl ThresholdTable {
    pub fn get(&self, threshold: f64) -> Option<f64> {
        self.0.iter().find(|(t, _)| *t == threshold).map(|(_, f)| *f)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.0.iter()
    }

    fn build(values: &[f64], thresholds: &[f64]) -> Self {
        let n = values.len() as f64;
        Self(
            thresholds
                .iter()
                .map(|&t| (t, values.iter().filter(|&&v| v <= t).count() as f64 / n))
                .collect(),
        )
    }
}

impl Serialize for ThresholdTable {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (t, f) in &self.0 {
            map.serialize_entry(&t.to_string(), f)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ThresholdTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = ThresholdTable;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from threshold to fraction")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut a: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = a.next_entry::<String, f64>()? {
                    let t = k.parse::<f64>().map_err(serde::de::Error::custom)?;
                    out.push((t, v));
                }
                Ok(ThresholdTable(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapTables {
    pub rotation: ThresholdTable,
    pub translation: ThresholdTable,
}

/// Fraction of samples with error ≤ each threshold.
pub fn map_aggregate(errors: &[PoseErrors], rot_thresholds: &[f64], trans_thresholds: &[f64]) -> Result<MapTables> {
    if errors.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rot: Vec<f64> = errors.iter().map(|e| e.rotation_deg).collect();
    let trans: Vec<f64> = errors.iter().map(|e| e.translation).collect();
    Ok(MapTables {
        rotation: ThresholdTable::build(&rot, rot_thresholds),
        translation: ThresholdTable::build(&trans, trans_thresholds),
    })
}

/// Evaluation record of one registered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvaluation {
    pub index: usize,
    pub rotation_deg: f64,
    pub translation: f64,
    pub add_distance: f64,
    pub add_pass: bool,
    pub predicted_matches: usize,
    pub true_inliers: usize,
    pub converged: bool,
}

impl SampleEvaluation {
    pub fn errors(&self) -> PoseErrors {
        PoseErrors {
            rotation_deg: self.rotation_deg,
            translation: self.translation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub thresholds: Thresholds,
    pub rotation_map: ThresholdTable,
    pub translation_map: ThresholdTable,
    pub add_rate: f64,
    pub mean_pred_matches: f64,
    pub mean_true_inliers: f64,
    pub count: usize,
    pub samples: Vec<SampleEvaluation>,
}

impl MetricsReport {
    pub fn from_samples(samples: Vec<SampleEvaluation>, thresholds: &Thresholds) -> Result<Self> {
        let errors: Vec<PoseErrors> = samples.iter().map(SampleEvaluation::errors).collect();
        let tables = map_aggregate(&errors, &thresholds.rotation_deg, &thresholds.translation)?;
        let n = samples.len() as f64;
        Ok(Self {
            thresholds: thresholds.clone(),
            rotation_map: tables.rotation,
            translation_map: tables.translation,
            add_rate: samples.iter().filter(|s| s.add_pass).count() as f64 / n,
            mean_pred_matches: samples.iter().map(|s| s.predicted_matches as f64).sum::<f64>() / n,
            mean_true_inliers: samples.iter().map(|s| s.true_inliers as f64).sum::<f64>() / n,
            count: samples.len(),
            samples,
        })
    }

    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let row = |name: &str, t: &ThresholdTable, unit: &str| -> String {
            let cells: Vec<String> = t.iter().map(|(k, v)| format!("{k}{unit}: {v:.3}")).collect();
            format!("{name:<16}{}\n", cells.join("  "))
        };
        out.push_str(&format!("samples         {}\n", self.count));
        out.push_str(&row("rotation mAP", &self.rotation_map, "°"));
        out.push_str(&row("translation mAP", &self.translation_map, ""));
        out.push_str(&format!("ADD rate        {:.3}\n", self.add_rate));
        out.push_str(&format!(
            "matches         pred {:.2}  true {:.2}\n",
            self.mean_pred_matches, self.mean_true_inliers
        ));
        out
    }
}

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Point3;
use crate::error::{Error, Result};

/// Inputs whose orthonormality defect exceeds this are rejected.
const MAX_REPAIRABLE_DEFECT: f64 = 1e-6;
/// Below this the rotation is stored as given.
const CLEAN_DEFECT: f64 = 1e-12;

/// Rigid transform x ↦ R·x + t mapping the source frame into the target frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Serialized layout: row-major 3×3 rotation and a translation triple.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> Self {
        let r = p.rotation;
        PoseRecord {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRecord> for Pose {
    type Error = Error;

    fn try_from(rec: PoseRecord) -> Result<Self> {
        let r = rec.rotation;
        Pose::new(
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::from(rec.translation),
        )
    }
}

impl Pose {
    /// Validates the rotation. Small orthonormality drift (Frobenius defect of
    /// RᵀR − I below 1e-6) is projected back onto SO(3); anything worse, or a
    /// reflection, is rejected.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        let rotation = if defect <= CLEAN_DEFECT {
            rotation
        } else if defect < MAX_REPAIRABLE_DEFECT {
            nearest_rotation(&rotation)
        } else {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (defect {defect:.3e})"
            )));
        };
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Uniform rotation and a translation uniform in [-half_extent, half_extent]³.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, half_extent: f64) -> Self {
        let rotation = random_rotation_uniform(rng);
        let translation = Vector3::from_fn(|_, _| rng.random_range(-half_extent..=half_extent));
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        // Products of valid rotations drift only at round-off level.
        Pose::new(rotation, translation).unwrap_or(Pose {
            rotation: nearest_rotation(&rotation),
            translation,
        })
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Frobenius distance between the 3×4 matrices [R | t].
    pub fn distance(&self, other: &Pose) -> f64 {
        ((self.rotation - other.rotation).norm_squared()
            + (self.translation - other.translation).norm_squared())
        .sqrt()
    }

    /// Rotation angle (radians) plus translation norm of `self⁻¹ ∘ other`.
    pub fn delta(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos() + (self.translation - other.translation).norm()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Closest proper rotation in Frobenius norm.
pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

pub fn rotation_about_axis(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Uniform draw from SO(3): a normalized 4-D standard Gaussian quaternion.
pub fn random_rotation_uniform<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-12 {
            return UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .into_inner();
        }
    }
}

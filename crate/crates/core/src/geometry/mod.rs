//! 3D primitives: point clouds, rigid poses, meshes, depth back-projection
//! and partial-view utilities.

mod depth;
mod kdtree;
pub mod io;
mod mesh;
mod noise;
mod pose;
mod visibility;

pub use depth::{backproject_depth, CameraIntrinsics, DepthImage};
pub use kdtree::KdTree;
pub use mesh::{sample_mesh_surface, TriangleMesh};
pub use noise::add_noise_and_outliers;
pub use pose::{random_rotation_uniform, rotation_about_axis, Pose};
pub use visibility::{convex_hull_vertices, hidden_point_removal, DEFAULT_HPR_GAMMA};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

/// Ordered set of finite 3D points, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates. Empty clouds are
    /// allowed here; registration entry points check the size themselves.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinitePoint(i));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Point3::new(r[0], r[1], r[2])).collect())
    }

    pub(crate) fn from_vec_unchecked(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn to_rows(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounding_box(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }

    /// Exact maximum pairwise distance, O(n²).
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max((a - b).norm_squared());
            }
        }
        best.sqrt()
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point3;
    type IntoIter = std::slice::Iter<'a, Point3>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// Maps every point through `pose`; the input is left untouched.
pub fn apply_pose(pose: &Pose, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.transform_point(p)).collect(),
    }
}

pub fn compose_pose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn invert_pose(p: &Pose) -> Pose {
    p.inverse()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_nan() {
        let err = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, Error::NonFinitePoint(1)));
    }

    #[test]
    fn apply_identity_and_translation() {
        let pc = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(apply_pose(&Pose::identity(), &pc), pc);

        let t = Pose::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let out = apply_pose(&t, &pc);
        assert_eq!(out.points()[0], Point3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn apply_axis_rotation() {
        let r = rotation_about_axis(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        let p = Pose::new(r, Vector3::zeros()).unwrap();
        let out = apply_pose(&p, &PointCloud::from_rows(&[[1.0, 0.0, 0.0]]).unwrap());
        assert_relative_eq!(out.points()[0], Point3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn apply_pose_is_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = Pose::random(&mut rng, 1.0);
        let rows: Vec<[f64; 3]> = (0..30)
            .map(|i| {
                let f = i as f64;
                [f.sin(), (0.3 * f).cos(), 0.1 * f]
            })
            .collect();
        let pc = PointCloud::from_rows(&rows).unwrap();
        let out = apply_pose(&pose, &pc);
        for i in 0..pc.len() {
            for j in 0..pc.len() {
                let before = (pc.points()[i] - pc.points()[j]).norm();
                let after = (out.points()[i] - out.points()[j]).norm();
                assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn diameter_of_segment() {
        let pc = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 3.0, 4.0]]).unwrap();
        assert_relative_eq!(pc.diameter(), 5.0);
    }
}

use serde::{Deserialize, Serialize};

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite principal point".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pixel coordinates and depth of a camera-frame point.
    pub fn project(&self, p: &Point3) -> (f64, f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        )
    }
}

/// Row-major depth map in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depth: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::InvalidDepth(format!(
                "expected {} values for {width}x{height}, got {}",
                width * height,
                depth.len()
            )));
        }
        if let Some(i) = depth.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidDepth(format!(
                "pixel {i} has invalid depth {}",
                depth[i]
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }
}

/// Lifts every valid pixel (u, v, z) to (z(u − cx)/fx, z(v − cy)/fy, z), row-major.
pub fn backproject_depth(d: &DepthImage, k: &CameraIntrinsics) -> Result<PointCloud> {
    let mut points = Vec::new();
    for v in 0..d.height {
        for u in 0..d.width {
            let z = d.get(u, v);
            if z > 0.0 {
                points.push(Point3::new(
                    z * (u as f64 - k.cx) / k.fx,
                    z * (v as f64 - k.cy) / k.fy,
                    z,
                ));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud::from_vec_unchecked(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_ray() {
        let k = CameraIntrinsics::new(500.0, 500.0, 2.0, 1.0).unwrap();
        let mut depth = vec![0.0; 4 * 3];
        depth[4 + 2] = 1.5;
        let pc = backproject_depth(&DepthImage::new(4, 3, depth).unwrap(), &k).unwrap();
        assert_eq!(pc.points(), &[Point3::new(0.0, 0.0, 1.5)]);
    }

    #[test]
    fn direct_formula() {
        let k = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
        let mut depth = vec![0.0; 101];
        depth[100] = 2.0;
        let pc = backproject_depth(&DepthImage::new(101, 1, depth).unwrap(), &k).unwrap();
        assert_eq!(pc.points(), &[Point3::new(2.0, 0.0, 2.0)]);
    }

    #[test]
    fn all_invalid_is_empty() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let err = backproject_depth(&DepthImage::new(3, 3, vec![0.0; 9]).unwrap(), &k).unwrap_err();
        assert!(matches!(err, Error::EmptyCloud));
    }

    #[test]
    fn validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(DepthImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DepthImage::new(1, 1, vec![-1.0]).is_err());
        assert!(DepthImage::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn projection_inverts_backprojection() {
        let k = CameraIntrinsics::new(525.0, 531.5, 319.5, 239.5).unwrap();
        let (w, h) = (16, 12);
        let depth: Vec<f64> = (0..w * h)
            .map(|i| if i % 7 == 0 { 0.0 } else { 0.4 + 0.013 * i as f64 })
            .collect();
        let img = DepthImage::new(w, h, depth).unwrap();
        let pc = backproject_depth(&img, &k).unwrap();
        let valid: Vec<(usize, usize)> = (0..h)
            .flat_map(|v| (0..w).map(move |u| (u, v)))
            .filter(|&(u, v)| img.get(u, v) > 0.0)
            .collect();
        assert_eq!(valid.len(), pc.len());
        for (p, &(u, v)) in pc.iter().zip(&valid) {
            let (pu, pv, pz) = k.project(p);
            assert!((pu - u as f64).abs() < 1e-9);
            assert!((pv - v as f64).abs() < 1e-9);
            assert!((pz - img.get(u, v)).abs() < 1e-9);
        }
    }
}

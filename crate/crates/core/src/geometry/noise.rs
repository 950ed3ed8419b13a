use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

/// Replaces ⌊fraction·N⌋ randomly chosen points with uniform samples from the
/// bounding box inflated by `bound`, and jitters the remaining points with
/// isotropic Gaussian noise of standard deviation `sigma`.
pub fn add_noise_and_outliers<R: Rng + ?Sized>(
    pc: &PointCloud,
    sigma: f64,
    outlier_fraction: f64,
    bound: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be ≥ 0, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&outlier_fraction) {
        return Err(Error::InvalidArgument(format!(
            "outlier fraction must be in [0, 1], got {outlier_fraction}"
        )));
    }
    if !(bound >= 0.0 && bound.is_finite()) {
        return Err(Error::InvalidArgument(format!("bound must be ≥ 0, got {bound}")));
    }
    let Some((lo, hi)) = pc.bounding_box() else {
        return Ok(pc.clone());
    };
    let n = pc.len();
    let n_out = ((outlier_fraction * n as f64).floor() as usize).min(n);
    let mut is_outlier = vec![false; n];
    for i in rand::seq::index::sample(rng, n, n_out) {
        is_outlier[i] = true;
    }
    let lo = lo - Vector3::repeat(bound);
    let hi = hi + Vector3::repeat(bound);
    let noise = Normal::new(0.0, sigma).expect("sigma validated");

    let points = pc
        .iter()
        .zip(&is_outlier)
        .map(|(p, &out)| {
            if out {
                Point3::new(
                    uniform(rng, lo.x, hi.x),
                    uniform(rng, lo.y, hi.y),
                    uniform(rng, lo.z, hi.z),
                )
            } else if sigma > 0.0 {
                p + Vector3::from_fn(|_, _| noise.sample(rng))
            } else {
                *p
            }
        })
        .collect();
    Ok(PointCloud::from_vec_unchecked(points))
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

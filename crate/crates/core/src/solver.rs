//! Weighted Kabsch alignment, ICP refinement and the registration entry point.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_features, Mode, NetParams};
use crate::geometry::{KdTree, Point3, PointCloud, Pose};
use crate::matching::{
    augment_scores, extract_matches, score_map, sinkhorn_log, MatchSet, DEFAULT_ALPHA, DEFAULT_LAMBDA,
    DEFAULT_MATCH_THRESHOLD, DEFAULT_SINKHORN_ITERS,
};

/// Second singular value of the centred, weight-normalized source matches
/// below which they count as collinear.
pub const COLLINEAR_TOL: f64 = 1e-9;
pub const DEFAULT_ICP_MAX_ITERS: usize = 50;
pub const DEFAULT_ICP_TOL: f64 = 1e-6;
/// Pairs farther than this multiple of the median distance are rejected.
pub const ICP_REJECT_FACTOR: f64 = 2.5;

/// R = V·diag(1, 1, det(VUᵀ))·Uᵀ for H = UΣVᵀ.
pub fn kabsch_rotation_from_covariance(h: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v requested").transpose();
    let d = (v * u.transpose()).determinant().signum();
    v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose()
}

fn kabsch_pairs(src: &[Point3], dst: &[Point3], w: &[f64]) -> Result<Pose> {
    let total: f64 = w.iter().sum();
    let used = w.iter().filter(|&&wi| wi > 0.0).count();
    if used < 3 || !(total > 0.0) {
        return Err(Error::DegenerateMatches(format!(
            "need at least 3 positively weighted matches, got {used}"
        )));
    }
    let mut xs = Vector3::zeros();
    let mut ys = Vector3::zeros();
    for ((x, y), &wi) in src.iter().zip(dst).zip(w) {
        xs += wi * x.coords;
        ys += wi * y.coords;
    }
    let xbar = xs / total;
    let ybar = ys / total;
    let mut h = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for ((x, y), &wi) in src.iter().zip(dst).zip(w) {
        let dx = x.coords - xbar;
        h += wi * dx * (y.coords - ybar).transpose();
        scatter += (wi / total) * dx * dx.transpose();
    }
    let mut ev: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[1].max(0.0).sqrt() < COLLINEAR_TOL {
        return Err(Error::DegenerateMatches("matched source points are collinear".into()));
    }
    let r = kabsch_rotation_from_covariance(&h);
    Pose::new(r, ybar - r * xbar)
}

/// Pose minimizing Σ w‖R x + t − y‖² over the given matches.
pub fn weighted_kabsch(x: &PointCloud, y: &PointCloud, matches: &MatchSet) -> Result<Pose> {
    let mut src = Vec::with_capacity(matches.len());
    let mut dst = Vec::with_capacity(matches.len());
    let mut w = Vec::with_capacity(matches.len());
    for m in matches.iter() {
        if m.source >= x.len() || m.target >= y.len() {
            return Err(Error::ShapeMismatch(format!(
                "match ({}, {}) outside clouds of size {} and {}",
                m.source,
                m.target,
                x.len(),
                y.len()
            )));
        }
        if !(m.weight >= 0.0) || !m.weight.is_finite() {
            return Err(Error::DegenerateMatches(format!("invalid weight {}", m.weight)));
        }
        src.push(x.points()[m.source]);
        dst.push(y.points()[m.target]);
        w.push(m.weight);
    }
    kabsch_pairs(&src, &dst, &w)
}

/// Which cloud supplies the query points of the nearest-neighbour step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IcpDirection {
    /// Every target point looks up its closest transformed source point.
    #[default]
    TargetToSource,
    /// Every transformed source point looks up its closest target point.
    SourceToTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub direction: IcpDirection,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_ICP_MAX_ITERS,
            tol: DEFAULT_ICP_TOL,
            direction: IcpDirection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpOutcome {
    pub pose: Pose,
    pub iterations: usize,
    pub converged: bool,
    /// Mean distance of accepted pairs, first at `init`, then after each
    /// accepted update.
    pub residuals: Vec<f64>,
}

struct Correspondences {
    src: Vec<Point3>,
    dst: Vec<Point3>,
    residual: f64,
}

struct IcpIndex<'a> {
    x: &'a PointCloud,
    y: &'a PointCloud,
    tree: KdTree,
    direction: IcpDirection,
}

impl<'a> IcpIndex<'a> {
    fn new(x: &'a PointCloud, y: &'a PointCloud, direction: IcpDirection) -> Self {
        let tree = match direction {
            IcpDirection::TargetToSource => KdTree::new(x),
            IcpDirection::SourceToTarget => KdTree::new(y),
        };
        Self { x, y, tree, direction }
    }

    fn correspond(&self, pose: &Pose) -> Correspondences {
        let pairs: Vec<(usize, usize, f64)> = match self.direction {
            IcpDirection::TargetToSource => {
                // Distances are pose-invariant, so query in the source frame.
                let inv = pose.inverse();
                self.y
                    .iter()
                    .enumerate()
                    .map(|(j, q)| {
                        let (i, d2) = self.tree.nearest(&inv.transform_point(q)).expect("nonempty");
                        (i, j, d2.sqrt())
                    })
                    .collect()
            }
            IcpDirection::SourceToTarget => self
                .x
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let (j, d2) = self.tree.nearest(&pose.transform_point(p)).expect("nonempty");
                    (i, j, d2.sqrt())
                })
                .collect(),
        };
        let mut dists: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let mid = dists.len() / 2;
        let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
        let cut = ICP_REJECT_FACTOR * *median;
        let mut out = Correspondences {
            src: Vec::new(),
            dst: Vec::new(),
            residual: 0.0,
        };
        let mut sum = 0.0;
        for (i, j, d) in pairs {
            if d <= cut {
                out.src.push(self.x.points()[i]);
                out.dst.push(self.y.points()[j]);
                sum += d;
            }
        }
        out.residual = sum / out.src.len() as f64;
        out
    }
}

/// Point-to-point ICP with median-based rejection. An update that would raise
/// the residual is discarded and the loop ends there.
pub fn icp_refine(x: &PointCloud, y: &PointCloud, init: &Pose, opts: &IcpOptions) -> Result<IcpOutcome> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut out = IcpOutcome {
        pose: *init,
        iterations: 0,
        converged: false,
        residuals: Vec::new(),
    };
    if opts.max_iters == 0 {
        return Ok(out);
    }
    let index = IcpIndex::new(x, y, opts.direction);
    let mut corr = index.correspond(init);
    out.residuals.push(corr.residual);
    for it in 1..=opts.max_iters {
        out.iterations = it;
        let ones = vec![1.0; corr.src.len()];
        let cand = kabsch_pairs(&corr.src, &corr.dst, &ones)?;
        let next = index.correspond(&cand);
        if next.residual > corr.residual {
            out.converged = true;
            return Ok(out);
        }
        let delta = out.pose.delta(&cand);
        out.pose = cand;
        out.residuals.push(next.residual);
        corr = next;
        if delta < opts.tol {
            out.converged = true;
            return Ok(out);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegisterOptions {
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    pub tau: f64,
    pub alpha: f64,
    pub use_icp: bool,
    pub icp: IcpOptions,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            sinkhorn_iters: DEFAULT_SINKHORN_ITERS,
            tau: DEFAULT_MATCH_THRESHOLD,
            alpha: DEFAULT_ALPHA,
            use_icp: false,
            icp: IcpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub pose: Pose,
    pub matches: MatchSet,
    pub predicted_match_count: usize,
    /// Set by evaluation when the ground truth is known.
    pub true_inlier_count: Option<usize>,
    pub icp_iterations_used: usize,
    pub converged: bool,
}

/// Features → scores → Sinkhorn → hard matches → Kabsch → optional ICP.
/// Degenerate matchings yield the identity pose with `converged = false`.
pub fn register(params: &NetParams, x: &PointCloud, y: &PointCloud, opts: &RegisterOptions) -> Result<RegistrationResult> {
    let (fx, fy, _) = extract_features(params, x, y, Mode::Eval)?;
    let aug = augment_scores(&score_map(&fx, &fy)?, opts.alpha);
    let p = sinkhorn_log(&aug, opts.lambda, opts.sinkhorn_iters)?;
    let matches = extract_matches(&p, opts.tau);
    let mut result = RegistrationResult {
        pose: Pose::identity(),
        predicted_match_count: matches.len(),
        matches,
        true_inlier_count: None,
        icp_iterations_used: 0,
        converged: false,
    };
    let Ok(pose) = weighted_kabsch(x, y, &result.matches) else {
        return Ok(result);
    };
    result.pose = pose;
    result.converged = true;
    if opts.use_icp {
        match icp_refine(x, y, &result.pose, &opts.icp) {
            Ok(icp) => {
                result.pose = icp.pose;
                result.icp_iterations_used = icp.iterations;
                result.converged = icp.converged;
            }
            Err(_) => result.converged = false,
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NormMode;
    use crate::geometry::{apply_pose, rotation_about_axis};
    use crate::matching::Match;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    #[test]
    fn recovers_exact_poses() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_cloud(&mut rng, 20);
            let pose = Pose::random(&mut rng, 1.0);
            let y = apply_pose(&pose, &x);
            let est = weighted_kabsch(&x, &y, &MatchSet::identity(20)).unwrap();
            assert!((est.rotation() - pose.rotation()).norm() < 1e-9);
            assert!((est.translation() - pose.translation()).amax() < 1e-9);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_cloud(&mut rng, 5);
        let id = weighted_kabsch(&x, &x, &MatchSet::identity(5)).unwrap();
        assert!(id.distance(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn zero_weight_outlier_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random_cloud(&mut rng, 10).into_points();
        let pose = Pose::random(&mut rng, 0.5);
        let mut y: Vec<Point3> = x.iter().map(|p| pose.transform_point(p)).collect();
        let base = weighted_kabsch(
            &PointCloud::new(x.clone()).unwrap(),
            &PointCloud::new(y.clone()).unwrap(),
            &MatchSet::identity(10),
        )
        .unwrap();
        x.push(Point3::new(50.0, -20.0, 3.0));
        y.push(Point3::new(-80.0, 9.0, 1.0));
        let mut ms = MatchSet::identity(10);
        ms.matches.push(Match {
            source: 10,
            target: 10,
            weight: 0.0,
        });
        let with = weighted_kabsch(&PointCloud::new(x).unwrap(), &PointCloud::new(y).unwrap(), &ms).unwrap();
        assert!(with.distance(&base) < 1e-12);
    }

    #[test]
    fn reflected_target_still_gives_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_cloud(&mut rng, 15);
        let y = PointCloud::new(x.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect()).unwrap();
        let est = weighted_kabsch(&x, &y, &MatchSet::identity(15)).unwrap();
        assert!((est.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_matches_are_rejected() {
        let x = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            weighted_kabsch(&x, &x, &MatchSet::identity(4)),
            Err(Error::DegenerateMatches(_))
        ));
        assert!(matches!(
            weighted_kabsch(&x, &x, &MatchSet::identity(2)),
            Err(Error::DegenerateMatches(_))
        ));
        let mut zero = MatchSet::identity(4);
        zero.matches.iter_mut().for_each(|m| m.weight = 0.0);
        assert!(matches!(weighted_kabsch(&x, &x, &zero), Err(Error::DegenerateMatches(_))));
    }

    #[test]
    fn kabsch_beats_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let x = random_cloud(&mut rng, 6);
            let y = random_cloud(&mut rng, 6);
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..2.0)).collect();
            let ms = MatchSet {
                matches: (0..6)
                    .map(|i| Match {
                        source: i,
                        target: i,
                        weight: w[i],
                    })
                    .collect(),
            };
            let cost = |p: &Pose| -> f64 {
                (0..6)
                    .map(|i| w[i] * (p.transform_point(&x.points()[i]) - y.points()[i]).norm_squared())
                    .sum()
            };
            let best = cost(&weighted_kabsch(&x, &y, &ms).unwrap());
            for _ in 0..10_000 {
                assert!(best <= cost(&Pose::random(&mut rng, 1.0)) + 1e-12);
            }
        }
    }

    #[test]
    fn icp_fixed_point_and_zero_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_cloud(&mut rng, 200);
        let pose = Pose::random(&mut rng, 0.5);
        let y = apply_pose(&pose, &x);
        let out = icp_refine(&x, &y, &pose, &IcpOptions::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        assert!(out.pose.distance(&pose) < 1e-9);

        let zero = IcpOptions {
            max_iters: 0,
            ..Default::default()
        };
        let out = icp_refine(&x, &y, &pose, &zero).unwrap();
        assert!(!out.converged);
        assert_eq!(out.pose, pose);
        assert!(icp_refine(&PointCloud::new(vec![]).unwrap(), &y, &pose, &zero).is_err());
    }

    #[test]
    fn icp_corrects_small_perturbations() {
        for (seed, direction) in [(0, IcpDirection::TargetToSource), (1, IcpDirection::SourceToTarget)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_cloud(&mut rng, 400);
            let pose = Pose::random(&mut rng, 0.5);
            let y = apply_pose(&pose, &x);
            let axis = Vector3::new(rng.random(), rng.random(), rng.random()).normalize();
            let perturb = Pose::new(rotation_about_axis(&axis, 5f64.to_radians()), Vector3::new(0.01, 0.0, 0.0)).unwrap();
            let init = perturb.compose(&pose);
            let opts = IcpOptions {
                direction,
                ..Default::default()
            };
            let out = icp_refine(&x, &y, &init, &opts).unwrap();
            assert!(rotation_angle(out.pose.rotation(), pose.rotation()) < 0.5);
            assert!(out.residuals.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn register_is_deterministic_and_icp_is_one_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = NetParams::init(&[16, 16], 5, NormMode::MatchNorm, &mut rng).unwrap();
        let x = random_cloud(&mut rng, 60);
        let y = apply_pose(&Pose::random(&mut rng, 0.3), &x.select(&(0..40).collect::<Vec<_>>()));
        let opts = RegisterOptions {
            tau: 0.0,
            ..Default::default()
        };
        let a = register(&params, &x, &y, &opts).unwrap();
        let b = register(&params, &x, &y, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.predicted_match_count, a.matches.len());
        if a.converged {
            assert_eq!(a.pose, weighted_kabsch(&x, &y, &a.matches).unwrap());
        }
        let c = register(&params, &x, &y, &RegisterOptions { use_icp: true, ..opts }).unwrap();
        assert_eq!(c.matches, a.matches);

        let unrelated = random_cloud(&mut rng, 40);
        let r = register(&params, &x, &unrelated, &RegisterOptions::default()).unwrap();
        assert!(r.pose.rotation().determinant() > 0.0);
    }
}

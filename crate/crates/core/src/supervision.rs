//! Ground-truth correspondences, the NLL loss, its gradient through the whole
//! pipeline, and a probe of SVD gradient instability.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{extract_features, extract_features_backward, ForwardCache, Mode, NetGrads, NetParams};
use crate::geometry::{apply_pose, random_rotation_uniform, PointCloud, Pose};
use crate::matching::{augment_scores, score_map, sinkhorn_backward, sinkhorn_log_traced, AugmentedAssignment};
use crate::solver::kabsch_rotation_from_covariance;

/// Distance threshold used to build ground truth, in model units.
pub const DEFAULT_GT_THRESHOLD: f64 = 0.02;
/// Floor applied to assignment entries inside the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Binary (M+1)×(N+1) correspondence matrix with outlier bins.
#[derive(Debug, Clone, PartialEq)]
pub struct GtCorrespondence {
    values: DMatrix<f64>,
    pairs: Vec<(usize, usize)>,
}

impl GtCorrespondence {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Interior (source, target) pairs, sorted by source index.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn inlier_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.values.nrows() - 1, self.values.ncols() - 1)
    }

    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    /// Builds the matrix from explicit pairs; unmatched rows and columns go
    /// to their outlier bins. Pairs must be one-to-one.
    pub fn from_pairs(m: usize, n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut values = DMatrix::zeros(m + 1, n + 1);
        let mut row_used = vec![false; m];
        let mut col_used = vec![false; n];
        for &(i, j) in pairs {
            if i >= m || j >= n {
                return Err(Error::ShapeMismatch(format!("pair ({i}, {j}) outside {m}x{n}")));
            }
            if row_used[i] || col_used[j] {
                return Err(Error::InvalidArgument(format!("pair ({i}, {j}) is not one-to-one")));
            }
            row_used[i] = true;
            col_used[j] = true;
            values[(i, j)] = 1.0;
        }
        for (i, used) in row_used.iter().enumerate() {
            if !used {
                values[(i, n)] = 1.0;
            }
        }
        for (j, used) in col_used.iter().enumerate() {
            if !used {
                values[(m, j)] = 1.0;
            }
        }
        let mut pairs = pairs.to_vec();
        pairs.sort_unstable();
        Ok(Self { values, pairs })
    }
}

/// Mutual-nearest correspondences within `d_thresh` after moving the source
/// by the ground-truth pose. Candidate ties resolve to the lower index.
pub fn build_gt_matrix(x: &PointCloud, y: &PointCloud, gt: &Pose, d_thresh: f64) -> Result<GtCorrespondence> {
    if !(d_thresh > 0.0) {
        return Err(Error::InvalidArgument(format!("distance threshold must be > 0, got {d_thresh}")));
    }
    let (m, n) = (x.len(), y.len());
    let moved = apply_pose(gt, x);
    let t2 = d_thresh * d_thresh;
    let mut row_best: Vec<Option<(f64, usize)>> = vec![None; m];
    let mut col_best: Vec<Option<(f64, usize)>> = vec![None; n];
    for (i, p) in moved.iter().enumerate() {
        for (j, q) in y.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d > t2 {
                continue;
            }
            if row_best[i].is_none_or(|(bd, _)| d < bd) {
                row_best[i] = Some((d, j));
            }
            if col_best[j].is_none_or(|(bd, _)| d < bd) {
                col_best[j] = Some((d, i));
            }
        }
    }
    let pairs: Vec<(usize, usize)> = row_best
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            let (_, j) = (*b)?;
            (col_best[j].map(|(_, bi)| bi) == Some(i)).then_some((i, j))
        })
        .collect();
    GtCorrespondence::from_pairs(m, n, &pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// ∂L/∂P̄, when requested.
    pub gradient: Option<DMatrix<f64>>,
}

/// Negative log-likelihood of the assignment at the ground-truth positions,
/// outlier bins included, normalized by the number of ground-truth entries.
pub fn nll_loss(p: &AugmentedAssignment, gt: &GtCorrespondence, with_gradient: bool) -> Result<LossValue> {
    let pv = p.values();
    let mv = gt.values();
    if pv.shape() != mv.shape() {
        return Err(Error::ShapeMismatch(format!(
            "assignment {:?} vs ground truth {:?}",
            pv.shape(),
            mv.shape()
        )));
    }
    let total = mv.sum();
    if total <= 0.0 {
        return Err(Error::EmptyGroundTruth);
    }
    let value = -pv
        .iter()
        .zip(mv.iter())
        .filter(|(_, &m)| m != 0.0)
        .map(|(&pij, &m)| m * pij.max(LOG_FLOOR).ln())
        .sum::<f64>()
        / total;
    let gradient = with_gradient.then(|| {
        pv.zip_map(mv, |pij, m| {
            if m == 0.0 || pij < LOG_FLOOR {
                0.0
            } else {
                -m / (pij * total)
            }
        })
    });
    Ok(LossValue { value, gradient })
}

/// ∂L/∂log P̄ of [`nll_loss`]; this is what the Sinkhorn backward consumes.
fn nll_grad_log_p(p: &AugmentedAssignment, gt: &GtCorrespondence) -> DMatrix<f64> {
    let total = gt.total();
    p.values().zip_map(gt.values(), |pij, m| {
        if m == 0.0 || pij < LOG_FLOOR {
            0.0
        } else {
            -m / total
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    pub alpha: f64,
    pub mode: Mode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            lambda: crate::matching::DEFAULT_LAMBDA,
            sinkhorn_iters: crate::matching::DEFAULT_SINKHORN_ITERS,
            alpha: crate::matching::DEFAULT_ALPHA,
            mode: Mode::Train,
        }
    }
}

pub struct GradientResult {
    pub loss: f64,
    pub grads: NetGrads,
    pub cache: ForwardCache,
    pub assignment: AugmentedAssignment,
}

/// Loss of the full pipeline features → scores → Sinkhorn → NLL.
pub fn pipeline_loss(
    params: &NetParams,
    x: &PointCloud,
    y: &PointCloud,
    gt: &GtCorrespondence,
    opts: &PipelineOptions,
) -> Result<f64> {
    let (fx, fy, _) = extract_features(params, x, y, opts.mode)?;
    let aug = augment_scores(&score_map(&fx, &fy)?, opts.alpha);
    let (p, _) = sinkhorn_log_traced(&aug, opts.lambda, opts.sinkhorn_iters)?;
    Ok(nll_loss(&p, gt, false)?.value)
}

/// Backpropagates the NLL loss through the unrolled Sinkhorn iterations, the
/// score map and the feature network.
pub fn end_to_end_gradient(
    params: &NetParams,
    x: &PointCloud,
    y: &PointCloud,
    gt: &GtCorrespondence,
    opts: &PipelineOptions,
) -> Result<GradientResult> {
    if gt.dims() != (x.len(), y.len()) {
        return Err(Error::ShapeMismatch(format!(
            "ground truth {:?} vs clouds ({}, {})",
            gt.dims(),
            x.len(),
            y.len()
        )));
    }
    let (fx, fy, cache) = extract_features(params, x, y, opts.mode)?;
    let aug = augment_scores(&score_map(&fx, &fy)?, opts.alpha);
    let (p, trace) = sinkhorn_log_traced(&aug, opts.lambda, opts.sinkhorn_iters)?;
    let loss = nll_loss(&p, gt, false)?.value;
    let g_aug = sinkhorn_backward(&trace, &nll_grad_log_p(&p, gt))?;
    let (m, n) = (x.len(), y.len());
    let g_s = g_aug.view((0, 0), (m, n));
    // S = Fxᵀ Fy
    let g_fx = fy.matrix() * g_s.transpose();
    let g_fy = fx.matrix() * g_s;
    let grads = extract_features_backward(params, &cache, &g_fx, &g_fy)?;
    Ok(GradientResult {
        loss,
        grads,
        cache,
        assignment: p,
    })
}

/// Sensitivities of an SVD-based pose solve at one singular-value gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdProbe {
    pub sigma_gap: f64,
    /// Max-abs finite-difference derivative of the singular-vector factors
    /// U, V with respect to the entries of H.
    pub factor_gradient: f64,
    /// Max-abs finite-difference derivative of the Kabsch rotation R(H).
    pub rotation_gradient: f64,
}

/// Fixed covariance H = U·diag(1 + gap, 1, 0.5)·Vᵀ.
fn probe_covariance(sigma_gap: f64) -> Matrix3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let u = random_rotation_uniform(&mut rng);
    let v = random_rotation_uniform(&mut rng);
    u * Matrix3::from_diagonal(&Vector3::new(1.0 + sigma_gap, 1.0, 0.5)) * v.transpose()
}

/// SVD with singular values sorted descending and each singular-vector pair
/// sign-aligned to `reference` (when given).
fn aligned_svd(h: &Matrix3<f64>, reference: Option<&(Matrix3<f64>, Matrix3<f64>)>) -> (Matrix3<f64>, Matrix3<f64>) {
    let svd = h.svd(true, true);
    let (u, v) = (svd.u.unwrap(), svd.v_t.unwrap().transpose());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut us = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    for (k, &o) in order.iter().enumerate() {
        let mut uc = u.column(o).into_owned();
        let mut vc = v.column(o).into_owned();
        let flip = match reference {
            Some((ru, _)) => uc.dot(&ru.column(k)) < 0.0,
            None => uc.iter().fold(0.0, |a: f64, &b| if b.abs() > a.abs() { b } else { a }) < 0.0,
        };
        if flip {
            uc = -uc;
            vc = -vc;
        }
        us.set_column(k, &uc);
        vs.set_column(k, &vc);
    }
    (us, vs)
}

/// Central-difference probe of how SVD-based pose solving reacts when two
/// singular values of the cross-covariance approach each other. The step is
/// min(1e-7, gap/100).
pub fn svd_gradient_probe(sigma_gap: f64) -> Result<SvdProbe> {
    if !(sigma_gap > 0.0) || !sigma_gap.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma gap must be > 0, got {sigma_gap}")));
    }
    let h0 = probe_covariance(sigma_gap);
    let step = (1e-7f64).min(sigma_gap / 100.0);
    let reference = aligned_svd(&h0, None);
    let mut factor: f64 = 0.0;
    let mut rotation: f64 = 0.0;
    for k in 0..9 {
        let (mut hp, mut hm) = (h0, h0);
        hp[k] += step;
        hm[k] -= step;
        let (up, vp) = aligned_svd(&hp, Some(&reference));
        let (um, vm) = aligned_svd(&hm, Some(&reference));
        factor = factor
            .max(((up - um) / (2.0 * step)).amax())
            .max(((vp - vm) / (2.0 * step)).amax());
        let dr = (kabsch_rotation_from_covariance(&hp) - kabsch_rotation_from_covariance(&hm)) / (2.0 * step);
        rotation = rotation.max(dr.amax());
    }
    Ok(SvdProbe {
        sigma_gap,
        factor_gradient: factor,
        rotation_gradient: rotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::NormMode;
    use crate::geometry::Point3;
    use rand::Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_alignment_is_identity_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_cloud(&mut rng, 30);
        let pose = Pose::random(&mut rng, 0.5);
        let y = apply_pose(&pose, &x);
        let gt = build_gt_matrix(&x, &y, &pose, 1e-3).unwrap();
        assert_eq!(gt.inlier_count(), 30);
        assert!(gt.pairs().iter().all(|&(i, j)| i == j));
        assert_eq!(gt.values().row(30).sum(), 0.0);
        assert_eq!(gt.values().column(30).sum(), 0.0);
    }

    #[test]
    fn displaced_target_is_all_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_cloud(&mut rng, 10);
        let shifted = Pose::from_translation(Vector3::new(0.0, 0.0, 10.0 * 0.05 + 2.0));
        let y = apply_pose(&shifted, &x);
        let gt = build_gt_matrix(&x, &y, &Pose::identity(), 0.05).unwrap();
        assert_eq!(gt.inlier_count(), 0);
        assert_eq!(gt.values().column(10).rows(0, 10).sum(), 10.0);
        assert_eq!(gt.values().row(10).columns(0, 10).sum(), 10.0);
        assert_eq!(gt.values()[(10, 10)], 0.0);
    }

    #[test]
    fn mutual_nearest_resolves_conflict() {
        let x = PointCloud::from_rows(&[[0.01, 0.0, 0.0], [0.02, 0.0, 0.0]]).unwrap();
        let y = PointCloud::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let gt = build_gt_matrix(&x, &y, &Pose::identity(), 0.05).unwrap();
        assert_eq!(gt.pairs(), &[(0, 0)]);
        assert_eq!(gt.values()[(1, 1)], 1.0);
        assert_eq!(gt.values()[(0, 1)], 0.0);
    }

    #[test]
    fn gt_is_bipartite_and_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_cloud(&mut rng, 60);
        let y = random_cloud(&mut rng, 50);
        let gt = build_gt_matrix(&x, &y, &Pose::identity(), 0.25).unwrap();
        let v = gt.values();
        for i in 0..60 {
            assert!(v.row(i).columns(0, 50).sum() <= 1.0);
            assert_eq!(v.row(i).sum(), 1.0);
        }
        for j in 0..50 {
            assert!(v.column(j).rows(0, 60).sum() <= 1.0);
            assert_eq!(v.column(j).sum(), 1.0);
        }
        let perm: Vec<usize> = (0..50).rev().collect();
        let yp = y.select(&perm);
        let gp = build_gt_matrix(&x, &yp, &Pose::identity(), 0.25).unwrap();
        for (new_j, &old_j) in perm.iter().enumerate() {
            assert_eq!(gp.values().column(new_j), v.column(old_j));
        }
    }

    fn assignment(vals: &[f64], r: usize, c: usize) -> AugmentedAssignment {
        AugmentedAssignment::from_matrix(DMatrix::from_row_slice(r, c, vals)).unwrap()
    }

    #[test]
    fn loss_values() {
        let gt = GtCorrespondence::from_pairs(1, 1, &[(0, 0)]).unwrap();
        let p = assignment(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        assert_eq!(nll_loss(&p, &gt, false).unwrap().value, 0.0);

        let gt = GtCorrespondence::from_pairs(2, 2, &[(0, 0), (1, 1)]).unwrap();
        let p = assignment(&[0.5, 0.0, 0.5, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0], 3, 3);
        assert!((nll_loss(&p, &gt, false).unwrap().value - std::f64::consts::LN_2).abs() < 1e-15);

        let empty = GtCorrespondence {
            values: DMatrix::zeros(2, 2),
            pairs: vec![],
        };
        assert!(matches!(nll_loss(&p, &empty, false), Err(Error::ShapeMismatch(_))));
        let empty = GtCorrespondence {
            values: DMatrix::zeros(3, 3),
            pairs: vec![],
        };
        assert!(matches!(nll_loss(&p, &empty, false), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = GtCorrespondence::from_pairs(2, 2, &[(1, 0)]).unwrap();
        let vals: Vec<f64> = (0..9).map(|_| rng.random_range(0.1..0.9)).collect();
        let p = assignment(&vals, 3, 3);
        let g = nll_loss(&p, &gt, true).unwrap().gradient.unwrap();
        let h = 1e-7;
        for k in 0..9 {
            let (mut a, mut b) = (vals.clone(), vals.clone());
            let (r, c) = (k / 3, k % 3);
            a[k] += h;
            b[k] -= h;
            let num = (nll_loss(&assignment(&a, 3, 3), &gt, false).unwrap().value
                - nll_loss(&assignment(&b, 3, 3), &gt, false).unwrap().value)
                / (2.0 * h);
            let an = g[(r, c)];
            let denom = an.abs().max(num.abs()).max(1e-12);
            assert!(
                (num - an).abs() / denom < 1e-6 || (num - an).abs() < 1e-12,
                "{k}: {num} vs {an}"
            );
        }
    }

    #[test]
    fn loss_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = GtCorrespondence::from_pairs(3, 2, &[(0, 1), (2, 0)]).unwrap();
        let vals: Vec<f64> = (0..12).map(|_| rng.random_range(0.01..1.0)).collect();
        let p = assignment(&vals, 4, 3);
        let l = nll_loss(&p, &gt, false).unwrap().value;
        assert!(l >= 0.0);
        // Permute source rows 0 and 2 in both matrices.
        let perm = [2usize, 1, 0, 3];
        let pp = AugmentedAssignment::from_matrix(p.values().select_rows(&perm)).unwrap();
        let gp = GtCorrespondence {
            values: gt.values().select_rows(&perm),
            pairs: vec![],
        };
        assert!((nll_loss(&pp, &gp, false).unwrap().value - l).abs() < 1e-15);
    }

    #[test]
    fn end_to_end_gradients_are_finite_and_lambda_sensitive() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = NetParams::init(&[6, 6], 3, NormMode::MatchNorm, &mut rng).unwrap();
            let x = random_cloud(&mut rng, 10);
            let pose = Pose::random(&mut rng, 0.3);
            let y = apply_pose(&pose, &x.select(&[0, 1, 2, 3, 4, 5, 6, 7]));
            let gt = build_gt_matrix(&x, &y, &pose, 0.02).unwrap();
            let opts = PipelineOptions {
                sinkhorn_iters: 20,
                ..Default::default()
            };
            let r = end_to_end_gradient(&params, &x, &y, &gt, &opts).unwrap();
            assert!(r.loss.is_finite() && r.grads.is_finite());
            if seed == 0 {
                let r2 = end_to_end_gradient(&params, &x, &y, &gt, &opts).unwrap();
                assert_eq!(r.grads, r2.grads);
                let doubled = PipelineOptions { lambda: 1.0, ..opts };
                let r3 = end_to_end_gradient(&params, &x, &y, &gt, &doubled).unwrap();
                let mut diff = r3.grads.clone();
                diff.add_scaled(&r.grads, -1.0);
                assert!(diff.max_abs() > 0.0);
            }
        }
    }

    #[test]
    fn probe_rejects_nonpositive_gap() {
        assert!(svd_gradient_probe(0.0).is_err());
        assert!(svd_gradient_probe(-1.0).is_err());
    }

    #[test]
    fn factor_derivatives_blow_up_while_rotation_stays_bounded() {
        let gaps = [1.0, 1e-1, 1e-2, 1e-3];
        let probes: Vec<SvdProbe> = gaps.iter().map(|&g| svd_gradient_probe(g).unwrap()).collect();
        for w in probes.windows(2) {
            assert!(w[1].factor_gradient >= w[0].factor_gradient);
        }
        assert!(probes[3].factor_gradient >= 10.0 * probes[0].factor_gradient);
        // The polar factor depends on 1/(σᵢ + σⱼ), not on the gap.
        for p in &probes {
            assert!(p.rotation_gradient.is_finite() && p.rotation_gradient < 5.0);
        }
    }

    #[test]
    fn pipeline_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let params = NetParams::init(&[8, 8], 3, NormMode::MatchNorm, &mut rng).unwrap();
            let x = random_cloud(&mut rng, 10);
            let y = random_cloud(&mut rng, 8);
            let gt = GtCorrespondence::from_pairs(10, 8, &[(0, 1), (2, 0), (3, 3), (7, 5), (9, 6)]).unwrap();
            let opts = PipelineOptions {
                sinkhorn_iters: 20,
                ..Default::default()
            };
            let analytic = end_to_end_gradient(&params, &x, &y, &gt, &opts).unwrap().grads.flat();
            let zeros = NetGrads::zeros_like(&params);
            let h = 1e-6;
            let numeric: Vec<f64> = (0..analytic.len())
                .map(|k| {
                    let eval = |d: f64| {
                        let mut p = params.clone();
                        p.for_each_param_mut(&zeros, |i, v, _| {
                            if i == k {
                                *v += d
                            }
                        });
                        pipeline_loss(&p, &x, &y, &gt, &opts).unwrap()
                    };
                    (eval(h) - eval(-h)) / (2.0 * h)
                })
                .collect();
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-3, "seed {seed}: rel {}", diff / scale);
        }
    }
}

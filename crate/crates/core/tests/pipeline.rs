use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use matchreg::features::{checkpoint, extract_features, match_normalize, FeatureTensor, Mode, NormMode};
use matchreg::geometry::{apply_pose, rotation_about_axis, Point3, PointCloud, Pose};
use matchreg::matching::{augment_scores, extract_matches, sinkhorn_log, MatchSet, ScoreMap};
use matchreg::metrics::{rotation_error, Thresholds};
use matchreg::solver::{register, weighted_kabsch, RegisterOptions};
use matchreg::supervision::{build_gt_matrix, nll_loss};
use matchreg::synth::{generate_dataset, read_dataset, write_dataset, RotationRange, ShapeKind, SynthConfig};
use matchreg::training::{evaluate, evaluate_oracle, train, EvalOptions, NoObserver, TrainConfig, TrainData};
use matchreg::Error;

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        m: 96,
        n: 64,
        shapes: ShapeKind::ASYMMETRIC.to_vec(),
        rotation_range: RotationRange::Limited(45.0),
        seed,
        ..Default::default()
    }
}

fn tiny_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        widths: vec![8, 8],
        knn_k: 4,
        checkpoint_every: 0,
        ..Default::default()
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = generate_dataset(&small_synth(3), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in ds.pairs().zip(back.pairs()) {
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert!(a.gt_pose.distance(&b.gt_pose) < 1e-12);
    }
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read_dataset(dir.path().join("nope")), Err(Error::ManifestNotFound(_)) | Err(Error::Io { .. })));
}

#[test]
fn oracle_evaluation_is_perfect() {
    let pairs: Vec<_> = generate_dataset(&small_synth(4), 5).unwrap().samples.into_iter().map(|s| s.pair).collect();
    let opts = EvalOptions {
        thresholds: Thresholds::unitless(),
        ..Default::default()
    };
    let r = evaluate_oracle(&pairs, &opts).unwrap();
    assert!(r.rotation_map.iter().all(|(_, v)| *v == 1.0));
    assert_eq!(r.add_rate, 1.0);
}

#[test]
fn train_save_load_and_evaluate() {
    let pairs: Vec<_> = generate_dataset(&small_synth(5), 4).unwrap().samples.into_iter().map(|s| s.pair).collect();
    let cfg = tiny_train(4);
    let (params, log) = train(&cfg, TrainData::Fixed(&pairs), cfg.init_params().unwrap(), None, &mut NoObserver).unwrap();
    assert_eq!(log.losses().len(), 4);
    assert!(log.losses().iter().all(|l| l.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    checkpoint::save(&path, &params).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded, params);

    let a = evaluate(&params, &pairs, &EvalOptions::default()).unwrap();
    let b = evaluate(&loaded, &pairs, &EvalOptions::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.count, 4);
}

#[test]
fn register_falls_back_to_identity_without_matches() {
    let pairs: Vec<_> = generate_dataset(&small_synth(6), 1).unwrap().samples.into_iter().map(|s| s.pair).collect();
    let params = tiny_train(1).init_params().unwrap();
    let opts = RegisterOptions {
        tau: 0.999,
        ..Default::default()
    };
    let r = register(&params, &pairs[0].source, &pairs[0].target, &opts).unwrap();
    if r.predicted_match_count < 3 {
        assert!(!r.converged);
        assert!(r.pose.distance(&Pose::identity()) == 0.0);
    }
}

#[test]
fn gt_matches_feed_kabsch_to_the_true_pose() {
    let pairs: Vec<_> = generate_dataset(&small_synth(7), 3).unwrap().samples.into_iter().map(|s| s.pair).collect();
    for p in &pairs {
        let gt = build_gt_matrix(&p.source, &p.target, &p.gt_pose, 0.02).unwrap();
        let matches = MatchSet {
            matches: gt
                .pairs()
                .iter()
                .map(|&(source, target)| matchreg::matching::Match { source, target, weight: 1.0 })
                .collect(),
        };
        let est = weighted_kabsch(&p.source, &p.target, &matches).unwrap();
        assert!(rotation_error(est.rotation(), p.gt_pose.rotation()) < 1e-6);
    }
}

fn cloud_strategy(n: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), n)
        .prop_map(|rows| PointCloud::from_rows(&rows).unwrap())
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-1.0..1.0f64), 0.0..std::f64::consts::PI, prop::array::uniform3(-1.0..1.0f64))
        .prop_filter("axis must be non-zero", |(a, _, _)| Vector3::from(*a).norm() > 1e-2)
        .prop_map(|(a, angle, t)| {
            Pose::new(rotation_about_axis(&Vector3::from(a).normalize(), angle), Vector3::from(t)).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kabsch_recovers_any_pose(x in cloud_strategy(12), pose in pose_strategy()) {
        let y = apply_pose(&pose, &x);
        let est = weighted_kabsch(&x, &y, &MatchSet::identity(12)).unwrap();
        prop_assert!(est.distance(&pose) < 1e-8);
    }

    #[test]
    fn sinkhorn_marginals_and_range(
        vals in prop::collection::vec(-4.0..4.0f64, 6 * 5),
        lambda in 0.5..2.0f64,
    ) {
        let s = DMatrix::from_vec(6, 5, vals);
        let p = sinkhorn_log(&augment_scores(&ScoreMap(s), 1.0), lambda, 300).unwrap();
        prop_assert!(p.row_violation() < 1e-9);
        prop_assert!(p.col_violation() < 1e-6);
        prop_assert!(p.values().iter().all(|v| (0.0..=6.0).contains(v)));
        for m in extract_matches(&p, 0.2).iter() {
            prop_assert!(m.weight >= 0.2);
        }
    }

    #[test]
    fn match_norm_is_centered_and_scale_free(
        ox in prop::collection::vec(-10.0..10.0f64, 4 * 9),
        oy in prop::collection::vec(-10.0..10.0f64, 4 * 6),
        c in 1e-2..1e2f64,
    ) {
        let fx = FeatureTensor::new(DMatrix::from_vec(4, 9, ox)).unwrap();
        let fy = FeatureTensor::new(DMatrix::from_vec(4, 6, oy)).unwrap();
        let (nx, ny, st) = match_normalize(&fx, &fy).unwrap();
        prop_assert!(nx.matrix().column_mean().amax() < 1e-10);
        prop_assert!(ny.matrix().column_mean().amax() < 1e-10);
        let sx = FeatureTensor::new(fx.matrix() * c).unwrap();
        let sy = FeatureTensor::new(fy.matrix() * c).unwrap();
        let (cx, cy, _) = match_normalize(&sx, &sy).unwrap();
        prop_assert!((cx.matrix() - nx.matrix()).amax() < 1e-10);
        prop_assert!((cy.matrix() - ny.matrix()).amax() < 1e-10);
        let (_, _, other) = match_normalize(&fx, &fx).unwrap();
        prop_assert_eq!(st.beta.to_bits(), other.beta.to_bits());
    }

    #[test]
    fn nll_is_nonnegative(x in cloud_strategy(10), pose in pose_strategy(), lambda in 0.2..1.0f64) {
        let y = apply_pose(&pose, &x.select(&[0, 2, 4, 6, 8]));
        let gt = build_gt_matrix(&x, &y, &pose, 0.02).unwrap();
        let s = DMatrix::from_fn(10, 5, |i, j| (x.points()[i] - Point3::origin()).dot(&(y.points()[j] - Point3::origin())));
        let p = sinkhorn_log(&augment_scores(&ScoreMap(s), 1.0), lambda, 50).unwrap();
        let loss = nll_loss(&p, &gt, true).unwrap();
        prop_assert!(loss.value >= 0.0 && loss.value.is_finite());
    }

    #[test]
    fn training_is_reproducible(seed in 0..1000u64) {
        let pairs: Vec<_> = generate_dataset(&small_synth(seed), 2).unwrap().samples.into_iter().map(|s| s.pair).collect();
        let cfg = TrainConfig { seed, ..tiny_train(2) };
        let a = train(&cfg, TrainData::Fixed(&pairs), cfg.init_params().unwrap(), None, &mut NoObserver).unwrap();
        let b = train(&cfg, TrainData::Fixed(&pairs), cfg.init_params().unwrap(), None, &mut NoObserver).unwrap();
        prop_assert_eq!(checkpoint::to_json(&a.0), checkpoint::to_json(&b.0));
    }
}

#[test]
fn normalization_modes_share_parameters_but_not_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pair = matchreg::synth::generate_pair(&small_synth(9), &mut rng).unwrap();
    let mn = tiny_train(1).init_params().unwrap();
    let pin = mn.with_normalization(NormMode::PerInstanceNorm);
    assert_eq!(mn.parameter_count(), pin.parameter_count());
    let (ax, ay, _) = extract_features(&mn, &pair.source, &pair.target, Mode::Eval).unwrap();
    let (bx, by, _) = extract_features(&pin, &pair.source, &pair.target, Mode::Eval).unwrap();
    // The source uses its own scale under both modes.
    assert_eq!(ax, bx);
    assert_ne!(ay, by);
}

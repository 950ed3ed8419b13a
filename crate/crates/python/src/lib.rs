//! Python bindings. Point clouds cross the boundary as sequences of
//! `[x, y, z]` rows; configs as JSON strings using the same keys as the
//! CLI config file sections.

use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mr::features::{checkpoint, NetParams, NormMode};
use mr::geometry::{PointCloud, Pose};
use mr::matching::{augment_scores, sinkhorn_log, Match, MatchSet, ScoreMap};
use mr::solver::{IcpOptions, RegisterOptions};
use mr::synth::{PairSample, SynthConfig};
use mr::training::{EvalOptions, NoObserver, TrainConfig, TrainData};

fn to_py(e: mr::Error) -> PyErr {
    use mr::Error as E;
    match e {
        E::Io { .. } | E::ManifestNotFound(_) => PyOSError::new_err(e.to_string()),
        E::NaNLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cloud(rows: Vec<[f64; 3]>) -> PyResult<PointCloud> {
    PointCloud::from_rows(&rows).map_err(to_py)
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn json_to_dict<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Rigid transform x ↦ R·x + t.
#[pyclass(name = "Pose", frozen, from_py_object)]
#[derive(Clone)]
struct PyPose(Pose);

#[pymethods]
impl PyPose {
    #[new]
    fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
        let r = rotation;
        let m = Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]);
        Pose::new(m, Vector3::from(translation)).map(PyPose).map_err(to_py)
    }

    #[staticmethod]
    fn identity() -> Self {
        PyPose(Pose::identity())
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let r = self.0.rotation();
        [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]])
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.0.translation();
        [t.x, t.y, t.z]
    }

    fn inverse(&self) -> Self {
        PyPose(self.0.inverse())
    }

    /// `self ∘ other`: apply `other` first.
    fn compose(&self, other: &PyPose) -> Self {
        PyPose(self.0.compose(&other.0))
    }

    fn apply(&self, points: Vec<[f64; 3]>) -> PyResult<Vec<[f64; 3]>> {
        Ok(mr::geometry::apply_pose(&self.0, &cloud(points)?).to_rows())
    }

    fn __repr__(&self) -> String {
        format!("Pose(rotation={:?}, translation={:?})", self.rotation(), self.translation())
    }
}

/// Feature network weights.
#[pyclass(name = "Network", frozen, from_py_object)]
#[derive(Clone)]
struct PyNetwork(NetParams);

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    #[pyo3(signature = (widths = vec![32, 64, 64], knn_k = 10, normalization = "match_norm", seed = 0))]
    fn init(widths: Vec<usize>, knn_k: usize, normalization: &str, seed: u64) -> PyResult<Self> {
        let mode: NormMode = normalization.parse().map_err(to_py)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetParams::init(&widths, knn_k, mode, &mut rng).map(PyNetwork).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        checkpoint::load(path).map(PyNetwork).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(path, &self.0).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    #[getter]
    fn normalization(&self) -> &'static str {
        self.0.normalization.as_str()
    }

    #[getter]
    fn knn_k(&self) -> usize {
        self.0.knn_k
    }
}

/// A synthetic source/target pair with its ground-truth pose.
#[pyclass(name = "Pair", frozen, from_py_object)]
#[derive(Clone)]
struct PyPair(PairSample);

#[pymethods]
impl PyPair {
    #[getter]
    fn source(&self) -> Vec<[f64; 3]> {
        self.0.source.to_rows()
    }

    #[getter]
    fn target(&self) -> Vec<[f64; 3]> {
        self.0.target.to_rows()
    }

    #[getter]
    fn pose(&self) -> PyPose {
        PyPose(self.0.gt_pose)
    }

    #[getter]
    fn shape(&self) -> &'static str {
        self.0.shape.as_str()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale
    }
}

#[pyclass(name = "Registration", frozen, skip_from_py_object)]
struct PyRegistration {
    #[pyo3(get)]
    pose: PyPose,
    /// `(source index, target index, weight)` triples.
    #[pyo3(get)]
    matches: Vec<(usize, usize, f64)>,
    #[pyo3(get)]
    predicted_match_count: usize,
    #[pyo3(get)]
    icp_iterations_used: usize,
    #[pyo3(get)]
    converged: bool,
}

fn match_set(matches: Vec<(usize, usize, f64)>) -> MatchSet {
    MatchSet {
        matches: matches
            .into_iter()
            .map(|(source, target, weight)| Match { source, target, weight })
            .collect(),
    }
}

/// Full pipeline on one pair.
#[pyfunction]
#[pyo3(signature = (network, source, target, use_icp = false, lambda_ = 0.5, sinkhorn_iters = 50, tau = 0.5, alpha = 1.0))]
#[allow(clippy::too_many_arguments)]
fn register(
    py: Python<'_>,
    network: &PyNetwork,
    source: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
    use_icp: bool,
    lambda_: f64,
    sinkhorn_iters: usize,
    tau: f64,
    alpha: f64,
) -> PyResult<PyRegistration> {
    let (x, y) = (cloud(source)?, cloud(target)?);
    let opts = RegisterOptions { lambda: lambda_, sinkhorn_iters, tau, alpha, use_icp, ..RegisterOptions::default() };
    let r = py.detach(|| mr::solver::register(&network.0, &x, &y, &opts)).map_err(to_py)?;
    Ok(PyRegistration {
        pose: PyPose(r.pose),
        matches: r.matches.iter().map(|m| (m.source, m.target, m.weight)).collect(),
        predicted_match_count: r.predicted_match_count,
        icp_iterations_used: r.icp_iterations_used,
        converged: r.converged,
    })
}

/// Weighted least-squares rigid transform from `(source, target, weight)` matches.
#[pyfunction]
fn weighted_kabsch(source: Vec<[f64; 3]>, target: Vec<[f64; 3]>, matches: Vec<(usize, usize, f64)>) -> PyResult<PyPose> {
    mr::solver::weighted_kabsch(&cloud(source)?, &cloud(target)?, &match_set(matches))
        .map(PyPose)
        .map_err(to_py)
}

/// Returns `(pose, iterations, converged, residuals)`.
#[pyfunction]
#[pyo3(signature = (source, target, init, max_iters = 50, tol = 1e-6))]
fn icp_refine(
    source: Vec<[f64; 3]>,
    target: Vec<[f64; 3]>,
    init: &PyPose,
    max_iters: usize,
    tol: f64,
) -> PyResult<(PyPose, usize, bool, Vec<f64>)> {
    let opts = IcpOptions { max_iters, tol, ..IcpOptions::default() };
    let out = mr::solver::icp_refine(&cloud(source)?, &cloud(target)?, &init.0, &opts).map_err(to_py)?;
    Ok((PyPose(out.pose), out.iterations, out.converged, out.residuals))
}

/// Augmented (M+1)×(N+1) assignment for an M×N score matrix.
#[pyfunction]
#[pyo3(signature = (scores, lambda_ = 0.5, iters = 50, alpha = 1.0))]
fn sinkhorn(scores: Vec<Vec<f64>>, lambda_: f64, iters: usize, alpha: f64) -> PyResult<Vec<Vec<f64>>> {
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || scores.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("scores must be a non-empty rectangular matrix"));
    }
    let m = nalgebra::DMatrix::from_fn(rows, cols, |i, j| scores[i][j]);
    let p = sinkhorn_log(&augment_scores(&ScoreMap(m), alpha), lambda_, iters).map_err(to_py)?;
    let v = p.values();
    Ok((0..v.nrows()).map(|i| v.row(i).iter().copied().collect()).collect())
}

/// Geodesic angle between two rotations, in degrees.
#[pyfunction]
fn rotation_error(r_hat: [[f64; 3]; 3], r_gt: [[f64; 3]; 3]) -> f64 {
    let m = |r: [[f64; 3]; 3]| Matrix3::from_fn(|i, j| r[i][j]);
    mr::metrics::rotation_error(&m(r_hat), &m(r_gt))
}

#[pyfunction]
fn translation_error(t_hat: [f64; 3], t_gt: [f64; 3]) -> f64 {
    mr::metrics::translation_error(&Vector3::from(t_hat), &Vector3::from(t_gt))
}

/// Returns `(mean_distance, pass)`.
#[pyfunction]
fn add_score(model: Vec<[f64; 3]>, pose_hat: &PyPose, pose_gt: &PyPose, diameter: f64) -> PyResult<(f64, bool)> {
    let s = mr::metrics::add_score(&cloud(model)?, &pose_hat.0, &pose_gt.0, diameter).map_err(to_py)?;
    Ok((s.mean_distance, s.pass))
}

/// Returns `(factor_gradient, rotation_gradient)` at the given singular value gap.
#[pyfunction]
fn svd_gradient_probe(sigma_gap: f64) -> PyResult<(f64, f64)> {
    let p = mr::supervision::svd_gradient_probe(sigma_gap).map_err(to_py)?;
    Ok((p.factor_gradient, p.rotation_gradient))
}

/// One synthetic pair from a synth config (JSON) and a seed.
#[pyfunction]
#[pyo3(signature = (config = None, seed = 0))]
fn generate_pair(config: Option<&str>, seed: u64) -> PyResult<PyPair> {
    let cfg: SynthConfig = parse_json(config)?;
    mr::synth::generate_pair(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
        .map(PyPair)
        .map_err(to_py)
}

/// Generates `count` pairs and writes them as a dataset directory.
#[pyfunction]
#[pyo3(signature = (directory, count, config = None))]
fn write_dataset(py: Python<'_>, directory: &str, count: usize, config: Option<&str>) -> PyResult<()> {
    let cfg: SynthConfig = parse_json(config)?;
    py.detach(|| {
        let ds = mr::synth::generate_dataset(&cfg, count)?;
        mr::synth::write_dataset(directory, &ds)
    })
    .map_err(to_py)
}

#[pyfunction]
fn read_dataset(directory: &str) -> PyResult<Vec<PyPair>> {
    let ds = mr::synth::read_dataset(directory).map_err(to_py)?;
    Ok(ds.samples.into_iter().map(|s| PyPair(s.pair)).collect())
}

/// Trains on a dataset directory; returns `(network, losses)`.
#[pyfunction]
#[pyo3(signature = (data_dir, config = None))]
fn train(py: Python<'_>, data_dir: &str, config: Option<&str>) -> PyResult<(PyNetwork, Vec<f64>)> {
    let cfg: TrainConfig = parse_json(config)?;
    let pairs: Vec<PairSample> = mr::synth::read_dataset(data_dir)
        .map_err(to_py)?
        .samples
        .into_iter()
        .map(|s| s.pair)
        .collect();
    let (params, log) = py
        .detach(|| {
            let init = cfg.init_params()?;
            mr::training::train(&cfg, TrainData::Fixed(&pairs), init, None, &mut NoObserver)
        })
        .map_err(to_py)?;
    Ok((PyNetwork(params), log.losses()))
}

/// Evaluates a network (or the ground truth when `network` is None) on a
/// dataset directory; returns the metrics report as a dict.
#[pyfunction]
#[pyo3(signature = (network, data_dir, config = None))]
fn evaluate<'py>(
    py: Python<'py>,
    network: Option<&PyNetwork>,
    data_dir: &str,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let opts: EvalOptions = parse_json(config)?;
    let pairs: Vec<PairSample> = mr::synth::read_dataset(data_dir)
        .map_err(to_py)?
        .samples
        .into_iter()
        .map(|s| s.pair)
        .collect();
    let report = py
        .detach(|| match network {
            Some(n) => mr::training::evaluate(&n.0, &pairs, &opts),
            None => mr::training::evaluate_oracle(&pairs, &opts),
        })
        .map_err(to_py)?;
    let text = serde_json::to_string(&report).expect("report serializes");
    json_to_dict(py, &text)
}

/// Partial-to-whole point cloud registration.
#[pymodule]
fn matchreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyPair>()?;
    m.add_class::<PyRegistration>()?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_kabsch, m)?)?;
    m.add_function(wrap_pyfunction!(icp_refine, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_error, m)?)?;
    m.add_function(wrap_pyfunction!(translation_error, m)?)?;
    m.add_function(wrap_pyfunction!(add_score, m)?)?;
    m.add_function(wrap_pyfunction!(svd_gradient_probe, m)?)?;
    m.add_function(wrap_pyfunction!(generate_pair, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

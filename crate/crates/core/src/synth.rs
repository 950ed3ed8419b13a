//! Procedural objects and synthetic partial-to-whole training pairs.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::io::{read_ply, write_ply};
use crate::geometry::{
    add_noise_and_outliers, apply_pose, hidden_point_removal, random_rotation_uniform, rotation_about_axis,
    sample_mesh_surface, Point3, PointCloud, Pose, TriangleMesh, DEFAULT_HPR_GAMMA,
};

pub const DATASET_FORMAT: &str = "matchreg-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const VIEW_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Cylinder,
    Sphere,
    Cone,
    /// L-shaped plate with unequal arms.
    LBlock,
    /// Prism over a scalene triangle.
    Wedge,
    /// Scalene tetrahedron.
    Tetra,
    /// Three-step staircase block.
    Step,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Box,
        ShapeKind::Cylinder,
        ShapeKind::Sphere,
        ShapeKind::Cone,
        ShapeKind::LBlock,
        ShapeKind::Wedge,
        ShapeKind::Tetra,
        ShapeKind::Step,
    ];
    pub const PRIMITIVES: [ShapeKind; 4] = [ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Sphere, ShapeKind::Cone];
    /// Kinds without any proper rotational symmetry.
    pub const ASYMMETRIC: [ShapeKind; 4] = [ShapeKind::LBlock, ShapeKind::Wedge, ShapeKind::Tetra, ShapeKind::Step];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cone => "cone",
            ShapeKind::LBlock => "l_block",
            ShapeKind::Wedge => "wedge",
            ShapeKind::Tetra => "tetra",
            ShapeKind::Step => "step",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm || (norm == "lblock" && *k == ShapeKind::LBlock))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape kind '{s}'")))
    }
}

/// Watertight mesh of the named shape. Characteristic size is `scale`: the
/// sphere diameter, the box edge, the cylinder and cone diameter and height,
/// and the largest bounding-box extent of the other kinds. Centred at the
/// origin.
pub fn make_shape(kind: ShapeKind, scale: f64) -> Result<TriangleMesh> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {scale}")));
    }
    let h = scale / 2.0;
    let (vertices, faces) = match kind {
        ShapeKind::Box => box_mesh(h),
        ShapeKind::Sphere => icosphere(h, 3),
        ShapeKind::Cylinder => lathe(&[(0.0, -h), (h, -h), (h, h), (0.0, h)], 48),
        ShapeKind::Cone => lathe(&[(0.0, -h), (h, -h), (0.0, h)], 48),
        ShapeKind::LBlock => fit(
            extrude(
                &[(0.0, 0.0), (1.0, 0.0), (1.0, 0.35), (0.35, 0.35), (0.35, 0.7), (0.0, 0.7)],
                (0.15, 0.15),
                0.3,
            ),
            scale,
        ),
        ShapeKind::Wedge => fit(extrude(&[(0.0, 0.0), (1.0, 0.0), (0.25, 0.6)], (0.4, 0.2), 0.4), scale),
        ShapeKind::Step => fit(
            extrude(
                &[
                    (0.0, 0.0),
                    (1.0, 0.0),
                    (1.0, 0.2),
                    (0.65, 0.2),
                    (0.65, 0.45),
                    (0.3, 0.45),
                    (0.3, 0.75),
                    (0.0, 0.75),
                ],
                (0.1, 0.1),
                0.45,
            ),
            scale,
        ),
        ShapeKind::Tetra => fit(
            (
                vec![
                    Point3::new(0.0, 0.0, 0.0),
                    Point3::new(1.0, 0.0, 0.0),
                    Point3::new(0.3, 0.8, 0.0),
                    Point3::new(0.2, 0.25, 0.6),
                ],
                vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [2, 0, 3]],
            ),
            scale,
        ),
    };
    TriangleMesh::new(vertices, faces)
}

type RawMesh = (Vec<Point3>, Vec<[usize; 3]>);

fn box_mesh(h: f64) -> RawMesh {
    let vertices = (0..8)
        .map(|i| {
            let s = |bit: usize| if i & bit != 0 { h } else { -h };
            Point3::new(s(1), s(2), s(4))
        })
        .collect();
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    (vertices, faces)
}

fn icosphere(radius: f64, subdivisions: usize) -> RawMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut dirs: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, dirs: &mut Vec<Vector3<f64>>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                dirs.push(((dirs[a] + dirs[b]) / 2.0).normalize());
                dirs.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut dirs);
            let bc = midpoint(b, c, &mut dirs);
            let ca = midpoint(c, a, &mut dirs);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (dirs.iter().map(|d| Point3::from(d * radius)).collect(), faces)
}

/// Surface of revolution about z of a (radius, z) profile whose first and
/// last entries lie on the axis.
fn lathe(profile: &[(f64, f64)], segments: usize) -> RawMesh {
    let mut vertices = vec![Point3::new(0.0, 0.0, profile[0].1)];
    let rings = &profile[1..profile.len() - 1];
    for &(r, z) in rings {
        for s in 0..segments {
            let a = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push(Point3::new(r * a.cos(), r * a.sin(), z));
        }
    }
    let top = vertices.len();
    vertices.push(Point3::new(0.0, 0.0, profile[profile.len() - 1].1));
    let ring = |k: usize, s: usize| 1 + k * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(0, s + 1), ring(0, s)]);
        for k in 0..rings.len() - 1 {
            faces.push([ring(k, s), ring(k, s + 1), ring(k + 1, s)]);
            faces.push([ring(k, s + 1), ring(k + 1, s + 1), ring(k + 1, s)]);
        }
        let last = rings.len() - 1;
        faces.push([ring(last, s), ring(last, s + 1), top]);
    }
    (vertices, faces)
}

/// Prism over a polygon that is star-shaped with respect to `kernel`.
fn extrude(poly: &[(f64, f64)], kernel: (f64, f64), height: f64) -> RawMesh {
    let n = poly.len();
    let mut vertices: Vec<Point3> = poly.iter().map(|&(x, y)| Point3::new(x, y, 0.0)).collect();
    vertices.extend(poly.iter().map(|&(x, y)| Point3::new(x, y, height)));
    vertices.push(Point3::new(kernel.0, kernel.1, 0.0));
    vertices.push(Point3::new(kernel.0, kernel.1, height));
    let (cb, ct) = (2 * n, 2 * n + 1);
    let mut faces = Vec::with_capacity(4 * n);
    for i in 0..n {
        let j = (i + 1) % n;
        faces.push([i, j, n + j]);
        faces.push([i, n + j, n + i]);
        faces.push([cb, j, i]);
        faces.push([ct, n + i, n + j]);
    }
    (vertices, faces)
}

/// Centres the bounding box at the origin and scales its largest extent.
fn fit((vertices, faces): RawMesh, scale: f64) -> RawMesh {
    let cloud = PointCloud::from_vec_unchecked(vertices);
    let (lo, hi) = cloud.bounding_box().expect("nonempty");
    let center = nalgebra::center(&lo, &hi);
    let s = scale / (hi - lo).amax();
    let vertices = cloud.iter().map(|p| Point3::from((p - center) * s)).collect();
    (vertices, faces)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationRange {
    Full,
    /// Maximum angle in degrees.
    Limited(f64),
}

impl FromStr for RotationRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(RotationRange::Full);
        }
        let deg = s.strip_prefix("limited:").unwrap_or(s);
        deg.parse::<f64>()
            .map(RotationRange::Limited)
            .map_err(|_| Error::InvalidArgument(format!("rotation range must be 'full' or degrees, got '{s}'")))
    }
}

impl RotationRange {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> nalgebra::Matrix3<f64> {
        match *self {
            RotationRange::Full => random_rotation_uniform(rng),
            RotationRange::Limited(max_deg) => {
                let axis = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let angle = rng.random_range(0.0..=max_deg.to_radians());
                rotation_about_axis(&axis, angle)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Source (full model) points.
    pub m: usize,
    /// Target (partial view) points.
    pub n: usize,
    pub shapes: Vec<ShapeKind>,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub rotation_range: RotationRange,
    pub scale_range: [f64; 2],
    /// Translations are uniform in [-e, e]³.
    pub translation_extent: f64,
    pub hpr_gamma: f64,
    /// Camera distance from the object centre, in units of object scale.
    pub view_distance: f64,
    /// Skip visibility and use every source point as a target candidate.
    pub full_view: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            m: 1024,
            n: 768,
            shapes: ShapeKind::PRIMITIVES.to_vec(),
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
            rotation_range: RotationRange::Full,
            scale_range: [1.0, 1.0],
            translation_extent: 0.5,
            hpr_gamma: DEFAULT_HPR_GAMMA,
            view_distance: 3.0,
            full_view: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::InvalidArgument(format!("{key}: {msg}")));
        if self.n == 0 || self.m <= self.n {
            return bad("m", format!("need m > n > 0, got m = {}, n = {}", self.m, self.n));
        }
        if self.shapes.is_empty() {
            return bad("shapes", "at least one shape kind is required".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", format!("must be ≥ 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction", format!("must be in [0, 1], got {}", self.outlier_fraction));
        }
        if let RotationRange::Limited(d) = self.rotation_range {
            if !(d > 0.0 && d <= 180.0) {
                return bad("rotation_range", format!("limit must be in (0, 180], got {d}"));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale_range", format!("need 0 < lo ≤ hi, got [{lo}, {hi}]"));
        }
        if !(self.translation_extent >= 0.0 && self.translation_extent.is_finite()) {
            return bad("translation_extent", format!("must be ≥ 0, got {}", self.translation_extent));
        }
        if !(self.hpr_gamma > 0.0) {
            return bad("hpr_gamma", format!("must be > 0, got {}", self.hpr_gamma));
        }
        if !(self.view_distance > 0.0 && self.view_distance.is_finite()) {
            return bad("view_distance", format!("must be > 0, got {}", self.view_distance));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Maps source coordinates onto the target.
    pub gt_pose: Pose,
    pub shape: ShapeKind,
    pub scale: f64,
    /// Distinct source points that survived visibility.
    pub visible_count: usize,
}

/// One source/target pair: sample the model, pose it, keep the part seen
/// from a random viewpoint, resize to `n` points, then corrupt.
pub fn generate_pair<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<PairSample> {
    cfg.validate()?;
    let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
    let [lo, hi] = cfg.scale_range;
    let scale = rng.random_range(lo..=hi);
    let mesh = make_shape(shape, scale)?;
    let source = sample_mesh_surface(&mesh, cfg.m, rng)?;
    let e = cfg.translation_extent;
    let translation = Vector3::from_fn(|_, _| rng.random_range(-e..=e));
    let gt_pose = Pose::new(cfg.rotation_range.sample(rng), translation)?;
    let posed = apply_pose(&gt_pose, &source);

    let visible = if cfg.full_view {
        (0..cfg.m).collect()
    } else {
        let center = Point3::from(translation);
        let mut attempt = 0;
        loop {
            let dir = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            let eye = center + dir * (cfg.view_distance * scale);
            match hidden_point_removal(&posed, &eye, cfg.hpr_gamma) {
                Ok(v) if !v.is_empty() => break v,
                Ok(_) | Err(Error::DegenerateView(_)) if attempt + 1 < VIEW_ATTEMPTS => attempt += 1,
                Ok(_) => return Err(Error::DegenerateView(0)),
                Err(e) => return Err(e),
            }
        }
    };
    let visible_count = visible.len();
    let chosen: Vec<usize> = if visible_count >= cfg.n {
        let mut pick: Vec<usize> = sample_indices(rng, visible_count, cfg.n).into_iter().map(|k| visible[k]).collect();
        pick.sort_unstable();
        pick
    } else {
        let mut pick = visible.clone();
        pick.extend((visible_count..cfg.n).map(|_| visible[rng.random_range(0..visible_count)]));
        pick
    };
    let mut target = posed.select(&chosen);
    if cfg.noise_sigma > 0.0 || cfg.outlier_fraction > 0.0 {
        target = add_noise_and_outliers(&target, cfg.noise_sigma, cfg.outlier_fraction, 0.1 * scale, rng)?;
    }
    Ok(PairSample {
        source,
        target,
        gt_pose,
        shape,
        scale,
        visible_count,
    })
}

/// Per-sample seed derived from the master seed and the sample index.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub index: usize,
    pub seed: u64,
    pub pair: PairSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<DatasetSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &PairSample> {
        self.samples.iter().map(|s| &s.pair)
    }
}

/// `count` pairs, each drawn from its own seeded stream so the result does
/// not depend on thread scheduling.
pub fn generate_dataset(cfg: &SynthConfig, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..count)
        .into_par_iter()
        .map(|index| {
            let seed = sample_seed(cfg.seed, index);
            let pair = generate_pair(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Ok(DatasetSample { index, seed, pair })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    index: usize,
    seed: u64,
    shape: ShapeKind,
    scale: f64,
    visible_count: usize,
    source: String,
    target: String,
    pose: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    count: usize,
    config: SynthConfig,
    samples: Vec<ManifestEntry>,
}

fn file_names(index: usize) -> (String, String, String) {
    (
        format!("{index:05}_source.ply"),
        format!("{index:05}_target.ply"),
        format!("{index:05}_pose.json"),
    )
}

pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let (src, tgt, pose) = file_names(s.index);
        write_ply(dir.join(&src), &s.pair.source)?;
        write_ply(dir.join(&tgt), &s.pair.target)?;
        let pose_path = dir.join(&pose);
        let text = serde_json::to_string_pretty(&s.pair.gt_pose).expect("pose serializes");
        std::fs::write(&pose_path, text + "\n").map_err(|e| Error::io(&pose_path, e))?;
        entries.push(ManifestEntry {
            index: s.index,
            seed: s.seed,
            shape: s.pair.shape,
            scale: s.pair.scale,
            visible_count: s.pair.visible_count,
            source: src,
            target: tgt,
            pose,
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        count: entries.len(),
        config: dataset.config.clone(),
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::ManifestNotFound(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
        return Err(Error::CorruptDataset(format!(
            "{}: expected {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    if manifest.count != manifest.samples.len() {
        return Err(Error::CorruptDataset(format!(
            "{}: count is {} but {} samples are listed",
            path.display(),
            manifest.count,
            manifest.samples.len()
        )));
    }
    let resolve = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::CorruptDataset(format!("missing sample file {}", p.display())))
        }
    };
    let mut samples = Vec::with_capacity(manifest.count);
    for e in manifest.samples {
        let source = read_ply(resolve(&e.source)?)?;
        let target = read_ply(resolve(&e.target)?)?;
        let pose_path = resolve(&e.pose)?;
        let text = std::fs::read_to_string(&pose_path).map_err(|err| Error::io(&pose_path, err))?;
        let gt_pose: Pose = serde_json::from_str(&text).map_err(|err| Error::json(&pose_path, err))?;
        samples.push(DatasetSample {
            index: e.index,
            seed: e.seed,
            pair: PairSample {
                source,
                target,
                gt_pose,
                shape: e.shape,
                scale: e.scale,
                visible_count: e.visible_count,
            },
        });
    }
    Ok(Dataset {
        config: manifest.config,
        samples,
    })
}

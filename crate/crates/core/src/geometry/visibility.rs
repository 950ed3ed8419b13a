use std::collections::HashSet;

use nalgebra::Vector3;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

pub const DEFAULT_HPR_GAMMA: f64 = 10.0;

/// Hidden point removal by spherical flipping.
///
/// Points are expressed relative to the viewpoint and flipped about a sphere
/// of radius `gamma · max‖p‖`; a point is visible iff its flipped image is a
/// vertex of the convex hull of the flipped set plus the viewpoint. Returns
/// the visible indices in increasing order.
pub fn hidden_point_removal(pc: &PointCloud, viewpoint: &Point3, gamma: f64) -> Result<Vec<usize>> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let rel: Vec<Vector3<f64>> = pc.iter().map(|p| p - viewpoint).collect();
    if let Some(i) = rel.iter().position(|p| p.norm() < 1e-9) {
        return Err(Error::DegenerateView(i));
    }
    let max_norm = rel.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let radius = gamma * max_norm;
    let mut flipped: Vec<Vector3<f64>> = rel
        .iter()
        .map(|p| {
            let n = p.norm();
            p + p * (2.0 * (radius - n) / n)
        })
        .collect();
    flipped.push(Vector3::zeros());
    let viewpoint_index = pc.len();

    match convex_hull_vertices(&flipped) {
        Some(hull) => Ok(hull.into_iter().filter(|&i| i != viewpoint_index).collect()),
        // Fewer than four affinely independent points: nothing can be occluded.
        None => Ok((0..pc.len()).collect()),
    }
}

struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
    alive: bool,
}

impl Face {
    fn new(v: [usize; 3], pts: &[Vector3<f64>]) -> Self {
        let normal = (pts[v[1]] - pts[v[0]])
            .cross(&(pts[v[2]] - pts[v[0]]))
            .normalize();
        Face {
            v,
            normal,
            offset: normal.dot(&pts[v[0]]),
            alive: true,
        }
    }

    fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Vertex indices of the 3D convex hull, sorted ascending; `None` when the
/// input spans less than three dimensions.
///
/// Incremental construction: each point outside the current hull removes the
/// faces it sees and is coned onto their horizon.
pub fn convex_hull_vertices(pts: &[Vector3<f64>]) -> Option<Vec<usize>> {
    if pts.len() < 4 {
        return None;
    }
    let scale = pts
        .iter()
        .flat_map(|p| p.iter().map(|c| c.abs()))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let eps = 1e-10 * scale;

    let i0 = (0..pts.len())
        .min_by(|&a, &b| pts[a].x.total_cmp(&pts[b].x))
        .unwrap();
    let i1 = argmax(pts, |p| (p - pts[i0]).norm())?;
    let axis = (pts[i1] - pts[i0]).normalize();
    if (pts[i1] - pts[i0]).norm() < eps {
        return None;
    }
    let i2 = argmax(pts, |p| {
        let d = p - pts[i0];
        (d - axis * d.dot(&axis)).norm()
    })?;
    let normal = axis.cross(&(pts[i2] - pts[i0]));
    if normal.norm() < eps * eps.max(1.0) || {
        let d = pts[i2] - pts[i0];
        (d - axis * d.dot(&axis)).norm() < eps
    } {
        return None;
    }
    let normal = normal.normalize();
    let i3 = argmax(pts, |p| (p - pts[i0]).dot(&normal).abs())?;
    if (pts[i3] - pts[i0]).dot(&normal).abs() < eps {
        return None;
    }

    let interior = (pts[i0] + pts[i1] + pts[i2] + pts[i3]) / 4.0;
    let mut faces: Vec<Face> = Vec::new();
    for tri in [[i0, i1, i2], [i0, i1, i3], [i0, i2, i3], [i1, i2, i3]] {
        let mut f = Face::new(tri, pts);
        if f.signed_distance(&interior) > 0.0 {
            f = Face::new([tri[0], tri[2], tri[1]], pts);
        }
        faces.push(f);
    }

    let seeds = [i0, i1, i2, i3];
    let mut visible = Vec::new();
    let mut edges: HashSet<(usize, usize)> = HashSet::new();
    for (pi, p) in pts.iter().enumerate() {
        if seeds.contains(&pi) {
            continue;
        }
        visible.clear();
        visible.extend(
            faces
                .iter()
                .enumerate()
                .filter(|(_, f)| f.alive && f.signed_distance(p) > eps)
                .map(|(fi, _)| fi),
        );
        if visible.is_empty() {
            continue;
        }
        edges.clear();
        for &fi in &visible {
            let [a, b, c] = faces[fi].v;
            edges.extend([(a, b), (b, c), (c, a)]);
            faces[fi].alive = false;
        }
        let horizon: Vec<(usize, usize)> = edges
            .iter()
            .filter(|&&(a, b)| !edges.contains(&(b, a)))
            .copied()
            .collect();
        for (a, b) in horizon {
            faces.push(Face::new([a, b, pi], pts));
        }
        if faces.len() > 64 && faces.iter().filter(|f| !f.alive).count() * 2 > faces.len() {
            faces.retain(|f| f.alive);
        }
    }

    let mut out: Vec<usize> = faces
        .iter()
        .filter(|f| f.alive)
        .flat_map(|f| f.v)
        .collect();
    out.sort_unstable();
    out.dedup();
    Some(out)
}

fn argmax(pts: &[Vector3<f64>], key: impl Fn(&Vector3<f64>) -> f64) -> Option<usize> {
    (0..pts.len()).max_by(|&a, &b| key(&pts[a]).total_cmp(&key(&pts[b])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sphere_points(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
                .normalize();
                Point3::from(v)
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn hull_of_cube_with_interior_points() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push(Vector3::new(x, y, z));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            pts.push(Vector3::new(
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ));
        }
        assert_eq!(convex_hull_vertices(&pts).unwrap(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn hull_matches_brute_force_extremality() {
        // A point is a hull vertex iff it is the unique maximizer of some
        // direction; on random Gaussian clouds check the hull against a
        // dense set of support directions.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vector3<f64>> = (0..300)
            .map(|_| Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let hull: HashSet<usize> = convex_hull_vertices(&pts).unwrap().into_iter().collect();
        for _ in 0..20_000 {
            let d = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let best = argmax(&pts, |p| p.dot(&d)).unwrap();
            assert!(hull.contains(&best));
        }
        // Every hull vertex must lie outside the hull of the others.
        for &h in &hull {
            let others: Vec<Vector3<f64>> = pts
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != h)
                .map(|(_, p)| *p)
                .collect();
            let sub: HashSet<usize> = convex_hull_vertices(&others).unwrap().into_iter().collect();
            let shifted = |i: usize| if i >= h { i + 1 } else { i };
            assert!(sub.iter().all(|&i| shifted(i) != h));
            assert!(sub.len() >= hull.len() - 1);
        }
    }

    #[test]
    fn coplanar_input_is_degenerate() {
        let pts: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new(i as f64, (i * i) as f64, 0.0))
            .collect();
        assert!(convex_hull_vertices(&pts).is_none());
    }

    #[test]
    fn single_point_is_visible() {
        let pc = PointCloud::from_rows(&[[0.2, 0.1, 0.0]]).unwrap();
        let vis = hidden_point_removal(&pc, &Point3::new(0.0, 0.0, 3.0), 10.0).unwrap();
        assert_eq!(vis, vec![0]);
    }

    #[test]
    fn viewpoint_on_point_is_rejected() {
        let pc = PointCloud::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let err = hidden_point_removal(&pc, &Point3::new(1.0, 0.0, 0.0), 10.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateView(1)));
    }

    #[test]
    fn sphere_front_visible_back_hidden() {
        let pc = sphere_points(2000, 7);
        let view = Point3::new(0.0, 0.0, 3.0);
        let vis = hidden_point_removal(&pc, &view, 10.0).unwrap();
        let nearest = |target: Point3| {
            (0..pc.len())
                .min_by(|&a, &b| {
                    (pc.points()[a] - target)
                        .norm()
                        .total_cmp(&(pc.points()[b] - target).norm())
                })
                .unwrap()
        };
        assert!(vis.contains(&nearest(Point3::new(0.0, 0.0, 1.0))));
        assert!(!vis.contains(&nearest(Point3::new(0.0, 0.0, -1.0))));
        let frac = vis.len() as f64 / pc.len() as f64;
        assert!((0.3..=0.7).contains(&frac), "visible fraction {frac}");
        // Geometrically visible cap is z > 1/3; nothing far behind it survives.
        assert!(vis.iter().all(|&i| pc.points()[i].z > 0.0));
        assert!(vis.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(vis, hidden_point_removal(&pc, &view, 10.0).unwrap());
    }
}

use rand::Rng;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(i) = vertices
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::NonFinitePoint(i));
        }
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&v| v >= vertices.len()) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} references vertex {bad}, mesh has {}",
                    vertices.len()
                )));
            }
        }
        let mesh = Self { vertices, faces };
        if mesh.total_area() <= 0.0 {
            return Err(Error::DegenerateMesh);
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }
}

/// Area-weighted uniform surface sampling: a face is drawn with probability
/// proportional to its area, then a point uniformly inside it.
pub fn sample_mesh_surface<R: Rng + ?Sized>(
    mesh: &TriangleMesh,
    n: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be ≥ 1".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        total += mesh.face_area(f);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::DegenerateMesh);
    }
    let points = (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            // Zero-area faces have an empty interval and are never picked.
            let f = cumulative
                .partition_point(|&c| c <= u)
                .min(cumulative.len() - 1);
            let [a, b, c] = mesh.faces[f].map(|i| mesh.vertices[i]);
            let s = rng.random::<f64>().sqrt();
            let r = rng.random::<f64>();
            Point3::from(a.coords * (1.0 - s) + b.coords * (s * (1.0 - r)) + c.coords * (s * r))
        })
        .collect();
    Ok(PointCloud::from_vec_unchecked(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(1.0, 1.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn square_samples_are_contained() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pc = sample_mesh_surface(&unit_square(), 1000, &mut rng).unwrap();
        assert_eq!(pc.len(), 1000);
        for p in &pc {
            assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
            assert_eq!(p.z, 0.0);
        }
    }

    #[test]
    fn face_selection_follows_area() {
        // Two disjoint right triangles with areas 1 and 3.
        let mesh = TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(2.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.0, 0.0, 5.0),
                Point3::new(3.0, 0.0, 5.0),
                Point3::new(0.0, 2.0, 5.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        assert!((mesh.face_area(0) - 1.0).abs() < 1e-15);
        assert!((mesh.face_area(1) - 3.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let pc = sample_mesh_surface(&mesh, n, &mut rng).unwrap();
        let frac = pc.iter().filter(|p| p.z > 2.5).count() as f64 / n as f64;
        // Binomial std at p = 0.75 is sqrt(0.1875 / 1e5) ≈ 0.00137.
        assert!((frac - 0.75).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn zero_area_face_never_sampled() {
        let mesh = TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 1.0),
                Point3::new(1.0, 0.0, 1.0),
                Point3::new(2.0, 0.0, 1.0),
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pc = sample_mesh_surface(&mesh, 5000, &mut rng).unwrap();
        assert!(pc.iter().all(|p| p.z == 0.0));
    }

    #[test]
    fn degenerate_mesh_rejected() {
        let err = TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 1.0, 1.0),
                Point3::new(2.0, 2.0, 2.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateMesh));
        let err = TriangleMesh::new(vec![Point3::origin()], vec![[0, 0, 3]]).unwrap_err();
        assert!(matches!(err, Error::InvalidMesh(_)));
    }

    #[test]
    fn samples_lie_on_face_planes() {
        let mesh = TriangleMesh::new(
            vec![
                Point3::new(0.3, -1.2, 0.7),
                Point3::new(1.9, 0.4, -0.2),
                Point3::new(-0.5, 0.8, 1.3),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let [a, b, c] = [0, 1, 2].map(|i| mesh.vertices()[i]);
        let normal = (b - a).cross(&(c - a)).normalize();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pc = sample_mesh_surface(&mesh, 2000, &mut rng).unwrap();
        for p in &pc {
            assert!((p - a).dot(&normal).abs() < 1e-12);
        }
    }
}

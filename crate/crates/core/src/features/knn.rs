use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Fixed-width neighbor table: row `i` lists the `k` nearest points to `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbors {
    k: usize,
    indices: Vec<usize>,
}

impl Neighbors {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks(self.k.max(1))
    }
}

/// Exhaustive k-NN, excluding the point itself. Neighbors are ordered by
/// distance, ties broken by lower index.
pub fn knn_indices(pc: &PointCloud, k: usize) -> Result<Neighbors> {
    let m = pc.len();
    if k == 0 || k >= m {
        return Err(Error::TooFewPoints { k, points: m });
    }
    let pts = pc.points();
    let mut indices = Vec::with_capacity(m * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m - 1);
    for (i, p) in pts.iter().enumerate() {
        cand.clear();
        cand.extend(
            pts.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| ((p - q).norm_squared(), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        indices.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(Neighbors { k, indices })
}

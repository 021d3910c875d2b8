//! Exact k-nearest-neighbour tables and neighbourhood max-pooling.

use std::cmp::Ordering;
use std::ops::Range;

use super::{Graph, Result, Tensor, TensorError};

/// How equal distances are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Lower point index first.
    Index,
    /// Lexicographically smaller coordinates first, then lower index. Independent of
    /// input order except for exact duplicates.
    Coordinates,
}

/// `k` neighbour indices per point, nearest first. Every point is its own neighbour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbors {
    pub k: usize,
    pub idx: Vec<u32>,
}

impl Neighbors {
    pub fn len(&self) -> usize {
        self.idx.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn of(&self, i: usize) -> &[u32] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }
}

fn sq_dist(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn coords_cmp(a: &[f32; 3], b: &[f32; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Brute-force kNN over `coords`. Neighbourhoods never cross segment boundaries, so
/// several scenes can share one table.
pub fn knn_indices_segmented(
    coords: &[[f32; 3]],
    k: usize,
    tie: TieBreak,
    segments: &[Range<usize>],
) -> Result<Neighbors> {
    if k == 0 {
        return Err(TensorError::Config("k must be at least 1".into()));
    }
    let mut idx = vec![0u32; coords.len() * k];
    let mut cand: Vec<(f32, u32)> = Vec::new();
    for seg in segments {
        let n = seg.len();
        if k > n {
            return Err(TensorError::Config(format!(
                "k = {k} exceeds the {n} points available"
            )));
        }
        for i in seg.clone() {
            let ci = &coords[i];
            cand.clear();
            cand.extend(seg.clone().map(|j| (sq_dist(ci, &coords[j]), j as u32)));
            let cmp = |a: &(f32, u32), b: &(f32, u32)| {
                // self first among exact duplicates, so every point is its own neighbour
                let base = a.0.total_cmp(&b.0).then((a.1 as usize != i).cmp(&(b.1 as usize != i)));
                match tie {
                    TieBreak::Index => base.then(a.1.cmp(&b.1)),
                    TieBreak::Coordinates => base
                        .then_with(|| coords_cmp(&coords[a.1 as usize], &coords[b.1 as usize]))
                        .then(a.1.cmp(&b.1)),
                }
            };
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            for (slot, &(_, j)) in idx[i * k..(i + 1) * k].iter_mut().zip(cand.iter()) {
                *slot = j;
            }
        }
    }
    Ok(Neighbors { k, idx })
}

pub fn knn_indices(coords: &[[f32; 3]], k: usize, tie: TieBreak) -> Result<Neighbors> {
    knn_indices_segmented(coords, k, tie, &[0..coords.len()])
}

pub(crate) fn coords_of(t: &Tensor) -> Result<Vec<[f32; 3]>> {
    if t.shape().len() != 2 || t.shape()[1] != 3 {
        return Err(TensorError::Shape {
            op: "knn coords",
            lhs: t.shape().to_vec(),
            rhs: vec![0, 3],
        });
    }
    Ok(t.data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

/// Row `i` of the result is the elementwise max of `feats` over the `k` nearest
/// neighbours of point `i` (self included, ties by lower index).
pub fn knn_aggregate(coords: &Tensor, feats: &Tensor, k: usize) -> Result<Tensor> {
    let c = coords_of(coords)?;
    if c.len() != feats.rows() {
        return Err(TensorError::Shape {
            op: "knn_aggregate",
            lhs: coords.shape().to_vec(),
            rhs: feats.shape().to_vec(),
        });
    }
    let nb = knn_indices(&c, k, TieBreak::Index)?;
    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let out = g.knn_max(f, &nb)?;
    Ok(g.value(out).clone())
}

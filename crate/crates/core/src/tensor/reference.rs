//! Straight-loop `f64` versions of the graph kernels. They share no code with the
//! tape and exist so finite-difference checks have an independent, higher-precision
//! forward route.

use super::graph::BN_EPS;
use super::knn::Neighbors;
use super::Tensor;

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = vec![0.0; x.rows * w.cols];
    for i in 0..x.rows {
        for j in 0..w.cols {
            let mut acc = b[j];
            for k in 0..x.cols {
                acc += x.at(i, k) * w.at(k, j);
            }
            out[i * w.cols + j] = acc;
        }
    }
    Mat {
        rows: x.rows,
        cols: w.cols,
        data: out,
    }
}

/// Normalise with the supplied statistics, or with the batch's own when `stats` is
/// `None`.
pub fn batch_norm(x: &Mat, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>) -> Mat {
    let n = x.rows as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mean: Vec<f64> = (0..x.cols)
                .map(|j| (0..x.rows).map(|i| x.at(i, j)).sum::<f64>() / n)
                .collect();
            let var = (0..x.cols)
                .map(|j| {
                    (0..x.rows)
                        .map(|i| (x.at(i, j) - mean[j]).powi(2))
                        .sum::<f64>()
                        / n
                })
                .collect();
            (mean, var)
        }
    };
    let mut out = x.clone();
    for i in 0..x.rows {
        for j in 0..x.cols {
            let xh = (x.at(i, j) - mean[j]) / (var[j] + BN_EPS as f64).sqrt();
            out.data[i * x.cols + j] = xh * gamma[j] + beta[j];
        }
    }
    out
}

pub fn relu(x: &Mat) -> Mat {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn knn_max(x: &Mat, nb: &Neighbors) -> Mat {
    let mut out = x.clone();
    for i in 0..x.rows {
        for j in 0..x.cols {
            out.data[i * x.cols + j] = nb
                .of(i)
                .iter()
                .map(|&n| x.at(n as usize, j))
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

pub fn gather_rows(x: &Mat, idx: &[u32]) -> Mat {
    let mut data = Vec::with_capacity(idx.len() * x.cols);
    for &i in idx {
        data.extend_from_slice(&x.data[i as usize * x.cols..(i as usize + 1) * x.cols]);
    }
    Mat {
        rows: idx.len(),
        cols: x.cols,
        data,
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn smoothed_cross_entropy(logits: &Mat, labels: &[usize], smoothing: f64) -> f64 {
    let c = logits.cols as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let lp = log_softmax_row(&logits.data[i * logits.cols..(i + 1) * logits.cols]);
        for (j, l) in lp.iter().enumerate() {
            let q = if j == y { 1.0 - smoothing + smoothing / c } else { smoothing / c };
            total -= q * l;
        }
    }
    total / labels.len() as f64
}

pub fn cosine_distill(pred: &Mat, target: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.rows {
        let p = &pred.data[i * pred.cols..(i + 1) * pred.cols];
        let t = &target.data[i * target.cols..(i + 1) * target.cols];
        let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        total -= dot / (pn * tn);
    }
    total / pred.rows as f64
}

pub fn softmax_entropy(logits: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..logits.rows {
        let lp = log_softmax_row(&logits.data[i * logits.cols..(i + 1) * logits.cols]);
        total -= lp.iter().map(|l| l.exp() * l).sum::<f64>();
    }
    total / logits.rows as f64
}

pub fn weighted_sum(x: &Mat, w: &Tensor) -> f64 {
    x.data.iter().zip(w.data()).map(|(a, &b)| a * b as f64).sum()
}

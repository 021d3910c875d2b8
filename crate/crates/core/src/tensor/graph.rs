//! Append-only tape. Nodes are pushed in evaluation order, so reverse insertion order
//! is a valid topological order for the backward sweep.

use std::collections::BTreeMap;

use super::knn::Neighbors;
use super::{gemm, Result, Tensor, TensorError};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm layer picks its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the caller folds them into the running buffers.
    Train,
    /// Running statistics, nothing updated.
    Eval,
    /// Running statistics while still training the affine parameters and inputs.
    FrozenStatsTrain,
    /// Batch statistics without touching the running buffers.
    BatchStats,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, BnMode::Train | BnMode::BatchStats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f32) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Per-feature mean and biased variance of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu {
        x: NodeId,
    },
    KnnMax {
        x: NodeId,
        src: Vec<u32>,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<u32>,
    },
    SmoothedCe {
        logits: NodeId,
        probs: Vec<f32>,
        labels: Vec<usize>,
        smoothing: f32,
    },
    CosineKd {
        pred: NodeId,
        target_unit: Vec<f32>,
        pred_norm: Vec<f32>,
        cos: Vec<f32>,
    },
    Entropy {
        logits: NodeId,
        probs: Vec<f32>,
        row_entropy: Vec<f32>,
    },
    Sum {
        x: NodeId,
    },
    SumSquares {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f32>,
    },
    Combine {
        terms: Vec<(NodeId, f32)>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    name: Option<String>,
}

/// Gradients of named leaves, in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.by_name.keys()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.by_name.insert(name, grad);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.by_name.remove(name)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.by_name.retain(|k, _| keep(k));
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.by_name.get_mut(name)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_rows(logits: &Tensor) -> Vec<f32> {
    let c = logits.cols();
    let mut out = vec![0.0; logits.numel()];
    for (row, o) in logits.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - max).exp();
            z += *oj;
        }
        for oj in o.iter_mut() {
            *oj /= z;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode(id.0))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Named leaf. Gets a gradient when `t.requires_grad` is set.
    pub fn leaf(&mut self, name: impl Into<String>, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        let id = self.push(t, Op::Leaf, needs);
        self.nodes[id.0].name = Some(name.into());
        id
    }

    /// `x·w + b` for `x: B×Din`, `w: Din×Dout`, `b: Dout`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (&self.node(x)?.value, &self.node(w)?.value, &self.node(b)?.value);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(shape_err("linear", xv, wv));
        }
        let (rows, din, dout) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
        if bv.numel() != dout {
            return Err(shape_err("linear bias", wv, bv));
        }
        let mut out = vec![0.0f32; rows * dout];
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(bv.data());
        }
        gemm(rows, din, dout, xv.data(), false, wv.data(), false, &mut out, true);
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![rows, dout], out)?,
            Op::Linear { x, w, b },
            needs,
        ))
    }

    /// Batch normalisation over rows. Returns the batch statistics whenever the mode
    /// computes them so the caller can update running buffers.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &RunningStats,
        mode: BnMode,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let (xv, gv, bv) = (
            &self.node(x)?.value,
            &self.node(gamma)?.value,
            &self.node(beta)?.value,
        );
        if xv.shape().len() != 2 {
            return Err(shape_err("batch_norm", xv, gv));
        }
        let (rows, d) = (xv.shape()[0], xv.shape()[1]);
        if gv.numel() != d || bv.numel() != d || running.mean.len() != d || running.var.len() != d
        {
            return Err(shape_err("batch_norm params", xv, gv));
        }
        let use_batch = mode.uses_batch_stats();
        if use_batch && rows < 2 {
            return Err(TensorError::BatchSize(rows));
        }
        let (mean, var, stats) = if use_batch {
            let mut mean = vec![0.0f64; d];
            for row in xv.data().chunks_exact(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0f64; d];
            for row in xv.data().chunks_exact(d) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let c = v as f64 - m;
                    *s += c * c;
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let mean: Vec<f32> = mean.into_iter().map(|m| m as f32).collect();
            let var: Vec<f32> = var.into_iter().map(|s| s as f32).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
            };
            (mean, var, Some(stats))
        } else {
            (running.mean.clone(), running.var.clone(), None)
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0f32; rows * d];
        let mut out = vec![0.0f32; rows * d];
        for ((row, xh), o) in xv
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .zip(out.chunks_exact_mut(d))
        {
            for j in 0..d {
                xh[j] = (row[j] - mean[j]) * inv_std[j];
                o[j] = xh[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        let id = self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: use_batch,
            },
            needs,
        );
        Ok((id, stats))
    }

    /// Batch norm that also folds train-mode statistics into `running` with
    /// [`BN_MOMENTUM`]. Other modes leave `running` untouched.
    pub fn batch_norm_update(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut RunningStats,
        mode: BnMode,
    ) -> Result<NodeId> {
        let (id, stats) = self.batch_norm(x, gamma, beta, running, mode)?;
        if let (BnMode::Train, Some(stats)) = (mode, stats) {
            running.update(&stats, BN_MOMENTUM);
        }
        Ok(id)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Relu { x }, needs))
    }

    /// Max-pool rows of `x` over precomputed neighbourhoods.
    pub fn knn_max(&mut self, x: NodeId, nb: &Neighbors) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let (n, d) = (xv.rows(), xv.cols());
        if nb.len() != n || nb.k == 0 {
            return Err(TensorError::Config(format!(
                "neighbour table covers {} points, features have {n}",
                nb.len()
            )));
        }
        let mut out = vec![0.0f32; n * d];
        let mut src = vec![0u32; n * d];
        let data = xv.data();
        for i in 0..n {
            let nbrs = nb.of(i);
            let first = nbrs[0] as usize;
            let o = &mut out[i * d..(i + 1) * d];
            let s = &mut src[i * d..(i + 1) * d];
            o.copy_from_slice(&data[first * d..(first + 1) * d]);
            s.fill(first as u32);
            for &j in &nbrs[1..] {
                let row = &data[j as usize * d..(j as usize + 1) * d];
                for c in 0..d {
                    if row[c] > o[c] {
                        o[c] = row[c];
                        s[c] = j;
                    }
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::KnnMax { x, src }, needs))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[u32]) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let (n, d) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return Err(TensorError::Config("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            let i = i as usize;
            if i >= n {
                return Err(TensorError::Config(format!("row {i} out of range for {n}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Mean cross-entropy against `(1 − ε)·onehot + ε/C`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        smoothing: f32,
    ) -> Result<NodeId> {
        let lv = &self.node(logits)?.value;
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Config(format!("smoothing {smoothing} not in [0,1)")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Label {
                label: bad,
                classes: c,
            });
        }
        let probs = softmax_rows(lv);
        let off = smoothing / c as f32;
        let on = 1.0 - smoothing + off;
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
            let mut l = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                let q = if j == y { on } else { off };
                if q > 0.0 {
                    l -= q as f64 * (v - lse) as f64;
                }
            }
            total += l;
        }
        let loss = (total / n as f64) as f32;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothedCe {
                logits,
                probs,
                labels: labels.to_vec(),
                smoothing,
            },
            needs,
        ))
    }

    /// Negative mean cosine similarity between rows of `pred` and a fixed `target`.
    pub fn cosine_distill(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let pv = &self.node(pred)?.value;
        if pv.shape() != target.shape() || pv.shape().len() != 2 {
            return Err(shape_err("cosine_distill", pv, target));
        }
        let (m, d) = (pv.rows(), pv.cols());
        let mut target_unit = vec![0.0f32; m * d];
        let mut pred_norm = vec![0.0f32; m];
        let mut cos = vec![0.0f32; m];
        let mut total = 0.0f64;
        for i in 0..m {
            let p = pv.row(i);
            let t = target.row(i);
            let pn = p.iter().map(|v| v * v).sum::<f32>().sqrt();
            let tn = t.iter().map(|v| v * v).sum::<f32>().sqrt();
            for norm in [pn, tn] {
                if norm.is_nan() || norm <= 1e-8 {
                    return Err(TensorError::DegenerateFeature { row: i, norm });
                }
            }
            let tu = &mut target_unit[i * d..(i + 1) * d];
            for (u, &v) in tu.iter_mut().zip(t) {
                *u = v / tn;
            }
            let c = p.iter().zip(tu.iter()).map(|(a, b)| a * b).sum::<f32>() / pn;
            pred_norm[i] = pn;
            cos[i] = c;
            total -= c as f64;
        }
        let loss = (total / m as f64) as f32;
        let needs = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CosineKd {
                pred,
                target_unit,
                pred_norm,
                cos,
            },
            needs,
        ))
    }

    /// Mean Shannon entropy of the row-wise softmax.
    pub fn softmax_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let lv = &self.node(logits)?.value;
        let (n, c) = (lv.rows(), lv.cols());
        let probs = softmax_rows(lv);
        let mut row_entropy = vec![0.0f32; n];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
            let h: f32 = (0..c)
                .map(|j| {
                    let p = probs[i * c + j];
                    -p * (row[j] - lse)
                })
                .sum();
            row_entropy[i] = h;
            total += h as f64;
        }
        let loss = (total / n as f64) as f32;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Entropy {
                logits,
                probs,
                row_entropy,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let s = xv.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, needs))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let s = xv.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() as f32;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumSquares { x }, needs))
    }

    /// `Σ x ⊙ weights` against a fixed weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &Tensor) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        if xv.shape() != weights.shape() {
            return Err(shape_err("weighted_sum", xv, weights));
        }
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>() as f32;
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            needs,
        ))
    }

    /// Weighted sum of scalar nodes. A zero weight drops the term from the sum and
    /// from the backward sweep.
    pub fn combine(&mut self, terms: &[(NodeId, f32)]) -> Result<NodeId> {
        let mut total = 0.0f32;
        let mut kept = Vec::new();
        for &(id, w) in terms {
            let v = &self.node(id)?.value;
            if !v.is_scalar() {
                return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
            }
            if w != 0.0 {
                total += w * v.item();
                kept.push((id, w));
            }
        }
        let ids: Vec<NodeId> = kept.iter().map(|t| t.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::scalar(total), Op::Combine { terms: kept }, needs))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate in node order, so the
    /// result is bitwise reproducible.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        let mut out = Gradients::default();
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Leaf, Some(name), true, Some(g)) =
                (&node.op, &node.name, node.needs_grad, g)
            {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match out.by_name.get_mut(name) {
                    Some(acc) => acc.add_assign(&t)?,
                    None => {
                        out.by_name.insert(name.clone(), t);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], id: NodeId, g: Vec<f32>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (rows, din, dout) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0f32; rows * din];
                    gemm(rows, dout, din, dy, false, wv.data(), true, &mut dx, false);
                    self.accumulate(grads, *x, dx);
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0f32; din * dout];
                    gemm(din, rows, dout, xv.data(), true, dy, false, &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0f32; dout];
                    for row in dy.chunks_exact(dout) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gv = self.nodes[gamma.0].value.data();
                let d = gv.len();
                let rows = dy.len() / d;
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for (dr, xr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dgamma[j] += dr[j] * xr[j];
                        dbeta[j] += dr[j];
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0f32; rows * d];
                    if *batch_stats {
                        let n = rows as f32;
                        for ((o, dr), xr) in dx
                            .chunks_exact_mut(d)
                            .zip(dy.chunks_exact(d))
                            .zip(xhat.chunks_exact(d))
                        {
                            for j in 0..d {
                                o[j] = gv[j] * inv_std[j] / n
                                    * (n * dr[j] - dbeta[j] - xr[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for (o, dr) in dx.chunks_exact_mut(d).zip(dy.chunks_exact(d)) {
                            for j in 0..d {
                                o[j] = dr[j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu { x } => {
                let xv = self.nodes[x.0].value.data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::KnnMax { x, src } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.cols();
                let mut dx = vec![0.0f32; xv.numel()];
                for (k, (&g, &s)) in dy.iter().zip(src).enumerate() {
                    dx[s as usize * d + k % d] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.cols();
                let mut dx = vec![0.0f32; xv.numel()];
                for (row, &i) in dy.chunks_exact(d).zip(idx) {
                    let dst = &mut dx[i as usize * d..(i as usize + 1) * d];
                    for (a, v) in dst.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SmoothedCe {
                logits,
                probs,
                labels,
                smoothing,
            } => {
                let c = self.nodes[logits.0].value.cols();
                let n = labels.len() as f32;
                let off = smoothing / c as f32;
                let on = 1.0 - smoothing + off;
                let scale = dy[0] / n;
                let mut dx = vec![0.0f32; probs.len()];
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let q = if j == y { on } else { off };
                        dx[i * c + j] = (probs[i * c + j] - q) * scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::CosineKd {
                pred,
                target_unit,
                pred_norm,
                cos,
            } => {
                let pv = &self.nodes[pred.0].value;
                let d = pv.cols();
                let m = pred_norm.len() as f32;
                let mut dx = vec![0.0f32; pv.numel()];
                for i in 0..pred_norm.len() {
                    let p = pv.row(i);
                    let t = &target_unit[i * d..(i + 1) * d];
                    let pn = pred_norm[i];
                    let scale = -dy[0] / (m * pn);
                    for j in 0..d {
                        dx[i * d + j] = scale * (t[j] - cos[i] * p[j] / pn);
                    }
                }
                self.accumulate(grads, *pred, dx);
            }
            Op::Entropy {
                logits,
                probs,
                row_entropy,
            } => {
                let lv = &self.nodes[logits.0].value;
                let c = lv.cols();
                let n = row_entropy.len() as f32;
                let mut dx = vec![0.0f32; lv.numel()];
                for i in 0..row_entropy.len() {
                    let row = lv.row(i);
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
                    for j in 0..c {
                        let p = probs[i * c + j];
                        let logp = row[j] - lse;
                        dx[i * c + j] = -p * (logp + row_entropy[i]) * dy[0] / n;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Sum { x } => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::SumSquares { x } => {
                let dx = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .map(|&v| 2.0 * v * dy[0])
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSum { x, weights } => {
                let dx = weights.iter().map(|&w| w * dy[0]).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Combine { terms } => {
                for &(id, w) in terms {
                    self.accumulate(grads, id, vec![w * dy[0]]);
                }
            }
        }
    }
}

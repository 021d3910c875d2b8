//! The 3D student: a k-NN point backbone, a label projector and a distillation
//! projector, with grouped parameters, freezing and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::scene::Scene;
use crate::tensor::knn::knn_indices_segmented;
use crate::tensor::optim::{AdamHyper, Moments, OptimizerKind, OptimizerState, ParamSet};
use crate::tensor::reference::{self, Mat};
use crate::tensor::{BatchStats, BnMode, Gradients, Graph, Neighbors, NodeId, RunningStats, Tensor, TensorError, TieBreak};

#[derive(Debug, Error)]
pub enum SegnetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, SegnetError>;

fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> SegnetError + '_ {
    move |source| SegnetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    ProjLabel,
    ProjKd,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Backbone, Group::ProjLabel, Group::ProjKd];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "backbone" => Ok(Group::Backbone),
            "proj_label" => Ok(Group::ProjLabel),
            "proj_kd" => Ok(Group::ProjKd),
            other => Err(SegnetError::Config(format!("unknown parameter group `{other}`"))),
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }
}

const BUFFER_TAG: u8 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_dim: usize,
    /// Output width of each backbone layer.
    pub widths: Vec<usize>,
    /// Neighbourhood size of the max-pool blocks.
    pub k: usize,
    /// How many of the leading layers are followed by a neighbourhood max-pool.
    pub blocks: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub kd_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_dim: 6,
            widths: vec![64, 64, 128],
            k: 8,
            blocks: 2,
            hidden: 128,
            num_classes: 8,
            kd_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(SegnetError::Config("backbone widths must be non-empty and positive".into()));
        }
        if self.k == 0 || self.in_dim == 0 || self.hidden == 0 || self.num_classes < 2 || self.kd_dim == 0 {
            return Err(SegnetError::Config(format!("{self:?} has a zero size")));
        }
        if self.blocks > self.widths.len() {
            return Err(SegnetError::Config(format!(
                "{} aggregation blocks for {} layers",
                self.blocks,
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub group: Group,
}

/// Named parameters split into groups, BN running buffers, and per-group freeze
/// flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Param>,
    pub buffers: BTreeMap<String, RunningStats>,
    frozen: BTreeSet<Group>,
}

impl ParamSet for ParamStore {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| self.frozen.contains(&p.group))
    }
}

fn bb(i: usize, what: &str) -> String {
    format!("bb.{i}.{what}")
}

/// Points of one or more scenes stacked row-wise, with neighbourhoods that stay
/// inside each scene.
#[derive(Debug, Clone)]
pub struct Batch {
    pub coords: Vec<[f32; 3]>,
    pub feats: Tensor,
    pub segments: Vec<Range<usize>>,
    pub neighbors: Neighbors,
}

impl Batch {
    pub fn from_scene(scene: &Scene, k: usize) -> Result<Self> {
        Self::from_scenes(&[scene], k)
    }

    pub fn from_scenes(scenes: &[&Scene], k: usize) -> Result<Self> {
        let mut coords = Vec::new();
        let mut feats = Vec::new();
        let mut segments = Vec::new();
        for s in scenes {
            if s.len() < k {
                return Err(SegnetError::Input(format!("scene has {} points, k = {k}", s.len())));
            }
            let start = coords.len();
            coords.extend_from_slice(&s.points);
            feats.extend(s.feats.iter().flatten().copied());
            segments.push(start..coords.len());
        }
        if coords.is_empty() {
            return Err(SegnetError::Input("empty batch".into()));
        }
        let neighbors = knn_indices_segmented(&coords, k, TieBreak::Coordinates, &segments)?;
        let feats = Tensor::new(vec![coords.len(), 6], feats)?;
        Ok(Self {
            coords,
            feats,
            segments,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Batch statistics of each BN layer from one forward pass, keyed by buffer name.
pub type LayerStats = Vec<(String, BatchStats)>;

impl ParamStore {
    /// Fresh model with He-style initialisation drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(rng::mix(seed, rng::tag("segnet-init")));
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut dense = |name: String, din: usize, dout: usize, gain: f64, group: Group, r: &mut rng::Rng| {
            let d = Normal::new(0.0, (gain / din as f64).sqrt()).unwrap();
            let w: Vec<f32> = (0..din * dout).map(|_| d.sample(r) as f32).collect();
            params.insert(
                format!("{name}.w"),
                Param {
                    tensor: Tensor::new(vec![din, dout], w).unwrap().with_grad(),
                    group,
                },
            );
            params.insert(
                format!("{name}.b"),
                Param {
                    tensor: Tensor::zeros(&[dout]).with_grad(),
                    group,
                },
            );
        };
        let mut din = config.in_dim;
        for (i, &w) in config.widths.iter().enumerate() {
            dense(format!("bb.{i}"), din, w, 2.0, Group::Backbone, &mut r);
            din = w;
        }
        let f = config.feature_dim();
        dense("label.0".into(), f, config.hidden, 2.0, Group::ProjLabel, &mut r);
        dense("label.1".into(), config.hidden, config.num_classes, 1.0, Group::ProjLabel, &mut r);
        dense("kd.0".into(), f, config.hidden, 2.0, Group::ProjKd, &mut r);
        dense("kd.1".into(), config.hidden, config.kd_dim, 1.0, Group::ProjKd, &mut r);
        for (i, &w) in config.widths.iter().enumerate() {
            params.insert(
                bb(i, "gamma"),
                Param {
                    tensor: Tensor::full(&[w], 1.0).with_grad(),
                    group: Group::Backbone,
                },
            );
            params.insert(
                bb(i, "beta"),
                Param {
                    tensor: Tensor::zeros(&[w]).with_grad(),
                    group: Group::Backbone,
                },
            );
            buffers.insert(bb(i, "bn"), RunningStats::new(w));
        }
        Ok(Self {
            config,
            params,
            buffers,
            frozen: BTreeSet::new(),
        })
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.params[name].tensor
    }

    pub fn names_in(&self, group: Group) -> impl Iterator<Item = &String> {
        self.params.iter().filter(move |(_, p)| p.group == group).map(|(n, _)| n)
    }

    /// Names of the BN affine parameters.
    pub fn bn_affine_names(&self) -> Vec<String> {
        (0..self.config.widths.len())
            .flat_map(|i| [bb(i, "gamma"), bb(i, "beta")])
            .collect()
    }

    pub fn set_freeze(&mut self, groups: &[Group], frozen: bool) {
        for g in groups {
            if frozen {
                self.frozen.insert(*g);
            } else {
                self.frozen.remove(g);
            }
        }
    }

    /// Same as [`set_freeze`](Self::set_freeze) with group names.
    pub fn set_freeze_by_name(&mut self, groups: &[&str], frozen: bool) -> Result<()> {
        let parsed = groups.iter().map(|g| Group::parse(g)).collect::<Result<Vec<_>>>()?;
        self.set_freeze(&parsed, frozen);
        Ok(())
    }

    pub fn is_group_frozen(&self, g: Group) -> bool {
        self.frozen.contains(&g)
    }

    /// Drop gradients of frozen or unknown parameters.
    pub fn discard_frozen(&self, grads: &mut Gradients) {
        grads.retain(|n| self.params.get(n).is_some_and(|p| !self.frozen.contains(&p.group)));
    }

    /// Fold per-layer batch statistics into the running buffers.
    pub fn apply_batch_stats(&mut self, stats: &LayerStats, momentum: f32) {
        for (name, s) in stats {
            if let Some(buf) = self.buffers.get_mut(name) {
                buf.update(s, momentum);
            }
        }
    }

    fn leaf(&self, g: &mut Graph, name: &str) -> NodeId {
        g.leaf(name, self.params[name].tensor.clone())
    }

    /// Backbone features `N × widths.last()`. Returns the batch statistics of
    /// every BN layer whenever `mode` computes them; running buffers are not
    /// touched here.
    pub fn backbone(&self, g: &mut Graph, batch: &Batch, mode: BnMode) -> Result<(NodeId, LayerStats)> {
        if batch.feats.cols() != self.config.in_dim {
            return Err(SegnetError::Input(format!(
                "features have {} columns, model expects {}",
                batch.feats.cols(),
                self.config.in_dim
            )));
        }
        if batch.neighbors.k != self.config.k {
            return Err(SegnetError::Input(format!(
                "batch neighbourhoods use k = {}, model expects {}",
                batch.neighbors.k, self.config.k
            )));
        }
        let mut h = g.constant(batch.feats.clone());
        let mut stats = Vec::new();
        for i in 0..self.config.widths.len() {
            let w = self.leaf(g, &bb(i, "w"));
            let b = self.leaf(g, &bb(i, "b"));
            let gamma = self.leaf(g, &bb(i, "gamma"));
            let beta = self.leaf(g, &bb(i, "beta"));
            let z = g.linear(h, w, b)?;
            let (n, s) = g.batch_norm(z, gamma, beta, &self.buffers[&bb(i, "bn")], mode)?;
            if let Some(s) = s {
                stats.push((bb(i, "bn"), s));
            }
            h = g.relu(n)?;
            if i < self.config.blocks {
                h = g.knn_max(h, &batch.neighbors)?;
            }
        }
        Ok((h, stats))
    }

    fn mlp(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w0 = self.leaf(g, &format!("{prefix}.0.w"));
        let b0 = self.leaf(g, &format!("{prefix}.0.b"));
        let w1 = self.leaf(g, &format!("{prefix}.1.w"));
        let b1 = self.leaf(g, &format!("{prefix}.1.b"));
        let h = g.linear(x, w0, b0)?;
        let h = g.relu(h)?;
        Ok(g.linear(h, w1, b1)?)
    }

    /// Raw class logits `N × C`.
    pub fn project_labels(&self, g: &mut Graph, features: NodeId) -> Result<NodeId> {
        self.mlp(g, features, "label")
    }

    /// Unnormalised distillation features `N × kd_dim`.
    pub fn project_kd(&self, g: &mut Graph, features: NodeId) -> Result<NodeId> {
        self.mlp(g, features, "kd")
    }

    /// Eval-mode logits for a whole batch.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let (f, _) = self.backbone(&mut g, batch, BnMode::Eval)?;
        let l = self.project_labels(&mut g, f)?;
        Ok(g.value(l).clone())
    }

    /// Independent `f64` forward returning `(features, logits, kd)`. `batch_stats`
    /// selects batch over running normalisation.
    pub fn reference_forward(&self, params: &BTreeMap<String, Vec<f64>>, batch: &Batch, batch_stats: bool) -> (Mat, Mat, Mat) {
        let mat = |name: &str, rows: usize, cols: usize| Mat {
            rows,
            cols,
            data: params[name].clone(),
        };
        let mut h = Mat::from_tensor(&batch.feats);
        let mut din = self.config.in_dim;
        for (i, &w) in self.config.widths.iter().enumerate() {
            let z = reference::linear(&h, &mat(&bb(i, "w"), din, w), &params[&bb(i, "b")]);
            let buf = &self.buffers[&bb(i, "bn")];
            let mean: Vec<f64> = buf.mean.iter().map(|&v| v as f64).collect();
            let var: Vec<f64> = buf.var.iter().map(|&v| v as f64).collect();
            let stats = (!batch_stats).then_some((mean.as_slice(), var.as_slice()));
            let n = reference::batch_norm(&z, &params[&bb(i, "gamma")], &params[&bb(i, "beta")], stats);
            h = reference::relu(&n);
            if i < self.config.blocks {
                h = reference::knn_max(&h, &batch.neighbors);
            }
            din = w;
        }
        let head = |prefix: &str, dout: usize| {
            let f = self.config.feature_dim();
            let hid = self.config.hidden;
            let a = reference::linear(
                &h,
                &mat(&format!("{prefix}.0.w"), f, hid),
                &params[&format!("{prefix}.0.b")],
            );
            let a = reference::relu(&a);
            reference::linear(
                &a,
                &mat(&format!("{prefix}.1.w"), hid, dout),
                &params[&format!("{prefix}.1.b")],
            )
        };
        let logits = head("label", self.config.num_classes);
        let kd = head("kd", self.config.kd_dim);
        (h, logits, kd)
    }

    /// Plain tensors for the gradient oracle.
    pub fn param_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(n, p)| (n.clone(), p.tensor.clone())).collect()
    }

    /// `true` when every parameter and buffer is bit-identical.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params_bitwise_eq(other) && self.buffers_bitwise_eq(other)
    }

    /// Learnable parameters only; BN running buffers are ignored.
    pub fn params_bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().all(|(n, p)| {
                other
                    .params
                    .get(n)
                    .is_some_and(|q| p.group == q.group && p.tensor.bitwise_eq(&q.tensor))
            })
    }

    pub fn buffers_bitwise_eq(&self, other: &ParamStore) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.buffers.len() == other.buffers.len()
            && self.buffers.iter().all(|(n, b)| {
                other
                    .buffers
                    .get(n)
                    .is_some_and(|c| bits(&b.mean) == bits(&c.mean) && bits(&b.var) == bits(&c.var))
            })
    }

    pub fn group_bitwise_eq(&self, other: &ParamStore, group: Group) -> bool {
        self.names_in(group).all(|n| {
            other
                .params
                .get(n)
                .is_some_and(|q| q.tensor.bitwise_eq(&self.params[n].tensor))
        })
    }
}

/// Deep copy of a model and (optionally) its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

pub fn snapshot(store: &ParamStore, opt: Option<&OptimizerState>) -> Checkpoint {
    Checkpoint {
        store: store.clone(),
        optimizer: opt.cloned(),
    }
}

/// Copy `ckpt` back into `store`/`opt`; every tensor must match in name and shape.
pub fn restore(ckpt: &Checkpoint, store: &mut ParamStore, opt: Option<&mut OptimizerState>) -> Result<()> {
    let fail = |reason: String| SegnetError::Checkpoint {
        path: "<memory>".into(),
        reason,
    };
    if ckpt.store.params.len() != store.params.len() {
        return Err(fail(format!(
            "{} tensors in checkpoint, model has {}",
            ckpt.store.params.len(),
            store.params.len()
        )));
    }
    for (n, p) in &ckpt.store.params {
        match store.params.get(n) {
            Some(q) if q.tensor.shape() == p.tensor.shape() => {}
            Some(q) => {
                return Err(fail(format!(
                    "`{n}` has shape {:?} in checkpoint, {:?} in model",
                    p.tensor.shape(),
                    q.tensor.shape()
                )))
            }
            None => return Err(fail(format!("model has no tensor `{n}`"))),
        }
    }
    let frozen = store.frozen.clone();
    *store = ckpt.store.clone();
    store.frozen = frozen;
    if let (Some(o), Some(saved)) = (opt, &ckpt.optimizer) {
        *o = saved.clone();
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"TTTC";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, tag: u8, shape: &[usize], data: &[f32]) {
        self.bytes(name.as_bytes());
        self.0.push(tag);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let cfg = serde_json::to_string(&ckpt.store.config).expect("config serialises");
    w.bytes(cfg.as_bytes());
    let s = &ckpt.store;
    w.u32((s.params.len() + 2 * s.buffers.len()) as u32);
    for (n, p) in &s.params {
        w.tensor(n, p.group.tag(), p.tensor.shape(), p.tensor.data());
    }
    for (n, b) in &s.buffers {
        w.tensor(&format!("{n}.mean"), BUFFER_TAG, &[b.mean.len()], &b.mean);
        w.tensor(&format!("{n}.var"), BUFFER_TAG, &[b.var.len()], &b.var);
    }
    match &ckpt.optimizer {
        None => w.u32(0),
        Some(o) => {
            w.u32(1);
            w.0.push(match o.kind {
                OptimizerKind::Sgd => 0,
                OptimizerKind::AdamW => 1,
            });
            w.u64(o.step);
            let h = o.hyper;
            for v in [h.lr, h.beta1, h.beta2, h.eps, h.weight_decay] {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
            w.u32(o.moments.len() as u32);
            for (n, m) in &o.moments {
                w.bytes(n.as_bytes());
                w.u64(m.steps);
                w.tensor("m", 0, m.m.shape(), m.m.data());
                w.tensor("v", 0, m.v.shape(), m.v.data());
            }
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> std::result::Result<Vec<u8>, String> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        String::from_utf8(self.bytes()?).map_err(|_| "name is not UTF-8".to_string())
    }

    fn tensor(&mut self) -> std::result::Result<(String, u8, Tensor), String> {
        let name = self.string()?;
        let tag = self.u8()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        Ok((name, tag, t))
    }
}

fn decode_inner(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("wrong magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let cfg: ModelConfig = serde_json::from_slice(&r.bytes()?).map_err(|e| format!("config: {e}"))?;
    let count = r.u32()? as usize;
    let mut params = BTreeMap::new();
    let mut halves: BTreeMap<String, (Option<Vec<f32>>, Option<Vec<f32>>)> = BTreeMap::new();
    for _ in 0..count {
        let (name, tag, t) = r.tensor()?;
        if tag == BUFFER_TAG {
            let (base, which) = name.rsplit_once('.').ok_or(format!("buffer name `{name}`"))?;
            let e = halves.entry(base.to_string()).or_default();
            match which {
                "mean" => e.0 = Some(t.into_data()),
                "var" => e.1 = Some(t.into_data()),
                _ => return Err(format!("buffer name `{name}`")),
            }
            continue;
        }
        let group = match tag {
            0 => Group::Backbone,
            1 => Group::ProjLabel,
            2 => Group::ProjKd,
            _ => return Err(format!("unknown group tag {tag} for `{name}`")),
        };
        params.insert(
            name,
            Param {
                tensor: t.with_grad(),
                group,
            },
        );
    }
    let mut buffers = BTreeMap::new();
    for (n, (m, v)) in halves {
        match (m, v) {
            (Some(mean), Some(var)) => {
                buffers.insert(n, RunningStats { mean, var });
            }
            _ => return Err(format!("buffer `{n}` lacks mean or var")),
        }
    }
    let optimizer = match r.u32()? {
        0 => None,
        1 => {
            let kind = match r.u8()? {
                0 => OptimizerKind::Sgd,
                1 => OptimizerKind::AdamW,
                k => return Err(format!("unknown optimizer kind {k}")),
            };
            let step = r.u64()?;
            let hyper = AdamHyper {
                lr: r.f32()?,
                beta1: r.f32()?,
                beta2: r.f32()?,
                eps: r.f32()?,
                weight_decay: r.f32()?,
            };
            let n = r.u32()? as usize;
            let mut moments = BTreeMap::new();
            for _ in 0..n {
                let name = r.string()?;
                let steps = r.u64()?;
                let (_, _, m) = r.tensor()?;
                let (_, _, v) = r.tensor()?;
                moments.insert(name, Moments { m, v, steps });
            }
            Some(OptimizerState {
                kind,
                step,
                hyper,
                moments,
            })
        }
        f => return Err(format!("bad optimizer flag {f}")),
    };
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    let reference = ParamStore::init(cfg.clone(), 0).map_err(|e| e.to_string())?;
    for (n, p) in &reference.params {
        match params.get(n) {
            Some(q) if q.tensor.shape() == p.tensor.shape() && q.group == p.group => {}
            _ => return Err(format!("tensor `{n}` missing or mis-shaped for the stored config")),
        }
    }
    if params.len() != reference.params.len() || buffers.len() != reference.buffers.len() {
        return Err("tensor set does not match the stored config".into());
    }
    Ok(Checkpoint {
        store: ParamStore {
            config: cfg,
            params,
            buffers,
            frozen: BTreeSet::new(),
        },
        optimizer,
    })
}

pub fn decode_checkpoint(buf: &[u8], path: &str) -> Result<Checkpoint> {
    decode_inner(buf).map_err(|reason| SegnetError::Checkpoint {
        path: path.to_string(),
        reason,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(io_err(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&buf, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};
    use crate::tensor::optim::sgd_step;

    fn small_scene(seed: u64) -> Scene {
        let spec = SceneSpec {
            points: [60, 80],
            image_height: 16,
            image_width: 16,
            cameras: 2,
            ..Default::default()
        };
        generate_scene(&spec, seed).unwrap()
    }

    #[test]
    fn groups_partition_params() {
        let s = ParamStore::init(ModelConfig::default(), 0).unwrap();
        let total: usize = Group::ALL.iter().map(|&g| s.names_in(g).count()).sum();
        assert_eq!(total, s.params.len());
        assert_eq!(s.buffers.len(), 3);
        assert!(s.params.values().all(|p| p.tensor.requires_grad));
    }

    #[test]
    fn shapes() {
        let s = ParamStore::init(ModelConfig::default(), 0).unwrap();
        let scene = small_scene(1);
        let b = Batch::from_scene(&scene, 8).unwrap();
        let mut g = Graph::new();
        let (f, _) = s.backbone(&mut g, &b, BnMode::Eval).unwrap();
        assert_eq!(g.value(f).shape(), &[scene.len(), 128]);
        let l = s.project_labels(&mut g, f).unwrap();
        let k = s.project_kd(&mut g, f).unwrap();
        assert_eq!(g.value(l).shape(), &[scene.len(), 8]);
        assert_eq!(g.value(k).shape(), &[scene.len(), 64]);
        assert!(g.value(l).is_finite());
    }

    #[test]
    fn too_few_points() {
        let scene = small_scene(1).select(&[0, 1, 2]);
        assert!(matches!(Batch::from_scene(&scene, 8), Err(SegnetError::Input(_))));
    }

    #[test]
    fn zero_label_head_gives_zero_logits() {
        let mut s = ParamStore::init(ModelConfig::default(), 0).unwrap();
        for n in s.names_in(Group::ProjLabel).cloned().collect::<Vec<_>>() {
            s.params.get_mut(&n).unwrap().tensor.data_mut().fill(0.0);
        }
        let scene = small_scene(2);
        let logits = s.predict(&Batch::from_scene(&scene, 8).unwrap()).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(logits.argmax_rows().iter().all(|&c| c == 0));
    }

    #[test]
    fn freezing_and_unknown_group() {
        let mut s = ParamStore::init(ModelConfig::default(), 0).unwrap();
        assert!(s.set_freeze_by_name(&["proj_label", "proj_kd"], true).is_ok());
        assert!(s.is_frozen("label.0.w") && s.is_frozen("kd.1.b") && !s.is_frozen("bb.0.w"));
        assert!(s.set_freeze_by_name(&["decoder"], true).is_err());
        let mut grads = Gradients::default();
        grads.insert("label.0.b".into(), Tensor::full(&[128], 1.0));
        assert!(sgd_step(&mut s, &grads, 0.1).is_err());
        s.discard_frozen(&mut grads);
        assert!(grads.is_empty());
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = ParamStore::init(ModelConfig::default(), 4).unwrap();
        let mut opt = OptimizerState::adamw(AdamHyper::default());
        opt.step = 3;
        opt.moments.insert(
            "bb.0.b".into(),
            Moments {
                m: Tensor::full(&[64], 0.5),
                v: Tensor::full(&[64], 0.25),
                steps: 3,
            },
        );
        let ck = snapshot(&s, Some(&opt));
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes, "mem").unwrap();
        assert!(back.store.bitwise_eq(&s));
        assert_eq!(back.optimizer, Some(opt));
        assert_eq!(encode_checkpoint(&back), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(decode_checkpoint(&bad, "mem").is_err());
    }

    #[test]
    fn restore_rejects_other_shapes() {
        let small = ParamStore::init(
            ModelConfig {
                widths: vec![32, 32, 64],
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let mut big = ParamStore::init(ModelConfig::default(), 0).unwrap();
        assert!(restore(&snapshot(&small, None), &mut big, None).is_err());
    }
}

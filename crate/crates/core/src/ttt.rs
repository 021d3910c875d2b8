//! Test-time training by distillation (offline and online), rotation ensembling,
//! and the entropy-minimisation and BN-statistics baselines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scene::Scene;
use crate::segnet::{Batch, Group, ParamStore};
use crate::teacher::SceneFeatures;
use crate::tensor::optim::{sgd_step, OptimizerState};
use crate::tensor::{BnMode, Graph, Tensor, TensorError};
use crate::trainer::{sample_kd_pairs, KdPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TttConfig {
    pub variant: Variant,
    /// Gradient steps per rotation (per updating rotation when online).
    pub steps: usize,
    pub lr: f32,
    pub rotations: usize,
    /// Distillation pairs per step, capped at what the scene has.
    pub budget: usize,
    /// Online only: update on every `stride`-th scene; `None` never updates.
    pub stride: Option<usize>,
    /// Online only: one update per scene instead of one per rotation.
    pub online_steps_total: bool,
    pub seed: u64,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Offline,
            steps: 100,
            lr: 0.1,
            rotations: 8,
            budget: 16384,
            stride: Some(1),
            online_steps_total: false,
            seed: 0,
        }
    }
}

impl TttConfig {
    pub fn online() -> Self {
        Self {
            variant: Variant::Online,
            steps: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.rotations < 1 || self.budget < 1 {
            return Err(Error::Config("steps, rotations and budget must be at least 1".into()));
        }
        if self.stride == Some(0) {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be non-negative", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub rotation: usize,
    pub step: usize,
    pub kd_loss: f32,
    pub micros: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptationTrace {
    pub steps: Vec<StepRecord>,
    pub rotation_logits: Vec<Tensor>,
    /// The scene had no correspondences; prediction fell back to plain ensembling.
    pub no_correspondences: bool,
}

impl AdaptationTrace {
    pub fn updates(&self) -> usize {
        self.steps.len()
    }

    /// Mean distillation loss at each step index, averaged over rotations.
    pub fn mean_loss_per_step(&self) -> Vec<f32> {
        let n = self.steps.iter().map(|s| s.step + 1).max().unwrap_or(0);
        let mut sum = vec![0.0f64; n];
        let mut cnt = vec![0usize; n];
        for s in &self.steps {
            sum[s.step] += s.kd_loss as f64;
            cnt[s.step] += 1;
        }
        sum.iter().zip(&cnt).map(|(s, &c)| (s / c as f64) as f32).collect()
    }
}

/// Seed stream for a scene derived from its geometry and colours only.
pub fn scene_seed(scene: &Scene) -> u64 {
    let h = scene
        .points
        .iter()
        .flatten()
        .chain(scene.feats.iter().flatten())
        .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits() as u64).wrapping_mul(0x0000_0100_0000_01B3)
        });
    rng::mix(h, scene.len() as u64)
}

pub fn rotation_angle(r: usize, rotations: usize) -> f32 {
    (std::f64::consts::TAU * r as f64 / rotations as f64) as f32
}

/// Sum of `predict(rotate_up(scene, 2πr/R), r)` over `r < R`, accumulated in
/// rotation order starting from the first prediction.
pub fn rotation_ensemble<F>(scene: &Scene, rotations: usize, mut predict: F) -> Result<Tensor>
where
    F: FnMut(&Scene, usize) -> Result<Tensor>,
{
    if rotations < 1 {
        return Err(Error::Config("rotations must be at least 1".into()));
    }
    let mut acc: Option<Tensor> = None;
    for r in 0..rotations {
        let rotated = scene.rotate_up(rotation_angle(r, rotations));
        let logits = predict(&rotated, r)?;
        match acc.as_mut() {
            None => acc = Some(logits),
            Some(a) => a.add_assign(&logits)?,
        }
    }
    Ok(acc.expect("at least one rotation"))
}

/// Eval-mode rotation ensemble of an unadapted model.
pub fn ensemble_predict(model: &ParamStore, scene: &Scene, rotations: usize) -> Result<Tensor> {
    rotation_ensemble(scene, rotations, |s, _| Ok(model.predict(&Batch::from_scene(s, model.config.k)?)?))
}

fn logits_with_mode(model: &ParamStore, batch: &Batch, mode: BnMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let (f, _) = model.backbone(&mut g, batch, mode)?;
    let l = model.project_labels(&mut g, f)?;
    Ok(g.value(l).clone())
}

/// One distillation step on `batch` with frozen BN statistics. Returns the loss.
fn kd_step(
    model: &mut ParamStore,
    batch: &Batch,
    pairs: &[KdPair],
    feats: &SceneFeatures,
    lr: f32,
) -> std::result::Result<f32, TensorError> {
    let corr: Vec<_> = pairs.iter().map(KdPair::correspondence).collect();
    let target = feats.targets(&corr).map_err(|e| TensorError::Config(e.to_string()))?;
    let idx: Vec<u32> = pairs.iter().map(|p| p.point).collect();
    let mut g = Graph::new();
    let (f, _) = model
        .backbone(&mut g, batch, BnMode::FrozenStatsTrain)
        .map_err(|e| TensorError::Config(e.to_string()))?;
    let pred = model.project_kd(&mut g, f).map_err(|e| TensorError::Config(e.to_string()))?;
    let picked = g.gather_rows(pred, &idx)?;
    let loss = g.cosine_distill(picked, &target)?;
    let mut grads = g.backward(loss)?;
    model.discard_frozen(&mut grads);
    sgd_step(model, &grads, lr)?;
    Ok(g.value(loss).item())
}

fn adapt_rotation(
    model: &mut ParamStore,
    batch: &Batch,
    scene: &Scene,
    feats: &SceneFeatures,
    steps: usize,
    lr: f32,
    rotation: usize,
    seed: u64,
    budget: usize,
    trace: &mut AdaptationTrace,
) -> Result<()> {
    for step in 0..steps {
        let s = rng::mix(rng::mix(seed, rotation as u64), step as u64);
        let Some(pairs) = sample_kd_pairs(scene, budget, s) else {
            trace.no_correspondences = true;
            return Ok(());
        };
        let t0 = Instant::now();
        let kd_loss = kd_step(model, batch, &pairs, feats, lr).map_err(|source| Error::Adaptation {
            rotation,
            step,
            source,
        })?;
        trace.steps.push(StepRecord {
            rotation,
            step,
            kd_loss,
            micros: t0.elapsed().as_micros() as u64,
        });
    }
    Ok(())
}

fn freeze_for_ttt(model: &mut ParamStore) {
    model.set_freeze(&[Group::ProjLabel, Group::ProjKd], true);
    model.set_freeze(&[Group::Backbone], false);
}

/// Offline TTT: adapt a private copy of `model` on `scene` (updates accumulate
/// across rotations) and return the summed logits. `model` is never modified.
pub fn ttt_offline(
    model: &ParamStore,
    scene: &Scene,
    feats: &SceneFeatures,
    config: &TttConfig,
) -> Result<(Tensor, AdaptationTrace)> {
    ttt_offline_adapted(model, scene, feats, config).map(|(l, t, _)| (l, t))
}

/// [`ttt_offline`], also returning the adapted copy as it stood after the last
/// rotation.
pub fn ttt_offline_adapted(
    model: &ParamStore,
    scene: &Scene,
    feats: &SceneFeatures,
    config: &TttConfig,
) -> Result<(Tensor, AdaptationTrace, ParamStore)> {
    config.validate()?;
    let mut work = model.clone();
    freeze_for_ttt(&mut work);
    let seed = rng::mix(config.seed, scene_seed(scene));
    let mut trace = AdaptationTrace::default();
    let logits = rotation_ensemble(scene, config.rotations, |rotated, r| {
        let batch = Batch::from_scene(rotated, work.config.k)?;
        if !trace.no_correspondences {
            adapt_rotation(
                &mut work,
                &batch,
                rotated,
                feats,
                config.steps,
                config.lr,
                r,
                seed,
                config.budget,
                &mut trace,
            )?;
        }
        let l = work.predict(&batch)?;
        trace.rotation_logits.push(l.clone());
        Ok(l)
    })?;
    Ok((logits, trace, work))
}

/// Persistent state of an online stream.
#[derive(Debug, Clone)]
pub struct OnlineState {
    pub model: ParamStore,
    /// Momentum-free SGD carries no buffers; kept so checkpoints capture the stream.
    pub optimizer: OptimizerState,
    pub counter: usize,
    pub updates: usize,
}

impl OnlineState {
    pub fn new(model: &ParamStore, lr: f32) -> Self {
        let mut model = model.clone();
        freeze_for_ttt(&mut model);
        Self {
            model,
            optimizer: OptimizerState::sgd(lr),
            counter: 0,
            updates: 0,
        }
    }
}

/// Online TTT on the next scene of a stream. Updates happen when the stream
/// counter is a multiple of the stride and persist in `state`.
pub fn ttt_online(
    state: &mut OnlineState,
    scene: &Scene,
    feats: &SceneFeatures,
    config: &TttConfig,
) -> Result<(Tensor, AdaptationTrace)> {
    config.validate()?;
    let update = config.stride.is_some_and(|s| state.counter % s == 0);
    let seed = rng::mix(config.seed, rng::mix(scene_seed(scene), state.counter as u64));
    let mut trace = AdaptationTrace::default();
    let model = &mut state.model;
    let logits = rotation_ensemble(scene, config.rotations, |rotated, r| {
        let batch = Batch::from_scene(rotated, model.config.k)?;
        if update && !trace.no_correspondences && (!config.online_steps_total || r == 0) {
            adapt_rotation(
                model,
                &batch,
                rotated,
                feats,
                config.steps,
                config.lr,
                r,
                seed,
                config.budget,
                &mut trace,
            )?;
        }
        let l = model.predict(&batch)?;
        trace.rotation_logits.push(l.clone());
        Ok(l)
    })?;
    state.optimizer.step += trace.updates() as u64;
    state.updates += trace.updates();
    state.counter += 1;
    Ok((logits, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub rotations: usize,
    pub tent_lr: f32,
    pub tent_steps: usize,
    pub dua_momentum: f32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            rotations: 8,
            tent_lr: 0.01,
            tent_steps: 1,
            dua_momentum: 0.1,
        }
    }
}

/// Entropy minimisation over BN affine parameters with per-scene batch
/// statistics. Updates persist in `model` across calls.
pub fn baseline_tent(model: &mut ParamStore, scene: &Scene, config: &BaselineConfig) -> Result<(Tensor, usize)> {
    let affine = model.bn_affine_names();
    let mut updates = 0;
    let logits = rotation_ensemble(scene, config.rotations, |rotated, _| {
        let batch = Batch::from_scene(rotated, model.config.k)?;
        for _ in 0..config.tent_steps {
            let mut g = Graph::new();
            let (f, _) = model.backbone(&mut g, &batch, BnMode::BatchStats)?;
            let l = model.project_labels(&mut g, f)?;
            let h = g.softmax_entropy(l)?;
            let mut grads = g.backward(h)?;
            grads.retain(|n| affine.iter().any(|a| a == n));
            sgd_step(model, &grads, config.tent_lr)?;
            updates += 1;
        }
        logits_with_mode(model, &batch, BnMode::BatchStats)
    })?;
    Ok((logits, updates))
}

/// Blend the scene's batch statistics into the BN running buffers, then predict
/// in eval mode. Weights never change; statistics persist across calls.
pub fn baseline_dua(model: &mut ParamStore, scene: &Scene, config: &BaselineConfig) -> Result<Tensor> {
    let batch = Batch::from_scene(scene, model.config.k)?;
    let mut g = Graph::new();
    let (_, stats) = model.backbone(&mut g, &batch, BnMode::BatchStats)?;
    model.apply_batch_stats(&stats, config.dua_momentum);
    ensemble_predict(model, scene, config.rotations)
}

/// BN-statistics-only prediction helper used by tests: batch-stat logits for one
/// pose.
pub fn batch_stat_logits(model: &ParamStore, scene: &Scene) -> Result<Tensor> {
    logits_with_mode(model, &Batch::from_scene(scene, model.config.k)?, BnMode::BatchStats)
}

//! Joint training on segmentation plus 2D→3D feature distillation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{augment, AugmentConfig, Correspondence, Scene};
use crate::segnet::{Batch, ParamStore};
use crate::teacher::SceneFeatures;
use crate::tensor::optim::{AdamHyper, OneCycle, OptimizerState};
use crate::tensor::{BnMode, Graph, Tensor, BN_MOMENTUM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_scenes: usize,
    pub max_lr: f32,
    pub div_initial: f32,
    pub div_final: f32,
    pub pct_start: f32,
    pub weight_decay: f32,
    pub label_smoothing: f32,
    /// Distillation pairs sampled per scene.
    pub kd_budget: usize,
    /// `(w_Y, w_KD)`.
    pub loss_weights: [f32; 2],
    /// Uniformly subsample scenes larger than this before each step.
    pub max_points: Option<usize>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_scenes: 2,
            max_lr: 0.005,
            div_initial: 10.0,
            div_final: 1000.0,
            pct_start: 0.3,
            weight_decay: 1e-4,
            label_smoothing: 0.2,
            kd_budget: 2048,
            loss_weights: [1.0, 1.0],
            max_points: None,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kd_budget < 1 {
            return bad("kd_budget must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if self.batch_scenes < 1 {
            return bad("batch_scenes must be at least 1".into());
        }
        if !(self.max_lr >= 0.0) || self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("learning rate and loss weights must be non-negative".into());
        }
        if self.max_points.is_some_and(|m| m < 16) {
            return bad("max_points must be at least 16".into());
        }
        Ok(())
    }

    pub fn schedule(&self, total_steps: usize) -> OneCycle {
        OneCycle {
            max_lr: self.max_lr,
            div_initial: self.div_initial,
            div_final: self.div_final,
            pct_start: self.pct_start,
            total_steps,
        }
    }
}

/// A sampled distillation target: point `point` seen at `(u, v)` in image `image`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KdPair {
    pub point: u32,
    pub image: usize,
    pub u: u16,
    pub v: u16,
}

impl KdPair {
    pub fn correspondence(&self) -> (usize, Correspondence) {
        (
            self.image,
            Correspondence {
                point: self.point,
                u: self.u,
                v: self.v,
            },
        )
    }
}

/// Uniform sample without replacement of up to `budget` correspondence pairs.
/// `None` when the scene has no correspondences.
pub fn sample_kd_pairs(scene: &Scene, budget: usize, seed: u64) -> Option<Vec<KdPair>> {
    let mut r = rng::rng(rng::mix(seed, rng::tag("kd-pairs")));
    sample_kd_pairs_with(scene, budget, &mut r)
}

fn sample_kd_pairs_with(scene: &Scene, budget: usize, r: &mut rng::Rng) -> Option<Vec<KdPair>> {
    let total = scene.num_pairs();
    if total == 0 {
        return None;
    }
    let flat: Vec<usize> = if budget >= total {
        let mut all: Vec<usize> = (0..total).collect();
        all.shuffle(r);
        all
    } else {
        rand::seq::index::sample(r, total, budget).into_vec()
    };
    let mut starts = Vec::with_capacity(scene.correspondences.len());
    let mut acc = 0;
    for cs in &scene.correspondences {
        starts.push(acc);
        acc += cs.len();
    }
    Some(
        flat.into_iter()
            .map(|f| {
                let image = starts.partition_point(|&s| s <= f) - 1;
                let c = scene.correspondences[image][f - starts[image]];
                KdPair {
                    point: c.point,
                    image,
                    u: c.u,
                    v: c.v,
                }
            })
            .collect(),
    )
}

/// Mean smoothed cross-entropy of `logits` against `labels`.
pub fn loss_ce(logits: &Tensor, labels: &[usize], smoothing: f32) -> Result<f32> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.smoothed_cross_entropy(l, labels, smoothing)?;
    Ok(g.value(loss).item())
}

/// Negative mean cosine similarity between rows.
pub fn loss_kd(pred: &Tensor, target: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let loss = g.cosine_distill(p, target)?;
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_y: f32,
    /// `None` when the batch had no correspondences.
    pub l_kd: Option<f32>,
    pub lr: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    /// Per-epoch means as `(epoch, L_Y, L_2D, last lr)`.
    pub fn epochs(&self) -> Vec<(usize, f32, f32, f32)> {
        let mut out: Vec<(usize, f32, f32, f32)> = Vec::new();
        let mut i = 0;
        while i < self.steps.len() {
            let e = self.steps[i].epoch;
            let run: Vec<&StepLog> = self.steps[i..].iter().take_while(|s| s.epoch == e).collect();
            let n = run.len() as f32;
            let ly = run.iter().map(|s| s.l_y).sum::<f32>() / n;
            let kds: Vec<f32> = run.iter().filter_map(|s| s.l_kd).collect();
            let lkd = if kds.is_empty() { f32::NAN } else { kds.iter().sum::<f32>() / kds.len() as f32 };
            out.push((e, ly, lkd, run.last().unwrap().lr));
            i += run.len();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_Y,L_2D,lr\n");
        for (e, ly, lkd, lr) in self.epochs() {
            writeln!(s, "{e},{ly},{lkd},{lr}").unwrap();
        }
        s
    }
}

/// Stack pair targets from the features of each scene in a batch.
fn kd_terms(
    scenes: &[(Scene, SceneFeatures)],
    budget: usize,
    r: &mut rng::Rng,
) -> Result<Option<(Vec<u32>, Tensor)>> {
    let mut idx = Vec::new();
    let mut rows = Vec::new();
    let mut offset = 0u32;
    let mut dim = 0;
    for (s, f) in scenes {
        if let Some(pairs) = sample_kd_pairs_with(s, budget, r) {
            let corr: Vec<_> = pairs.iter().map(KdPair::correspondence).collect();
            let t = f.targets(&corr)?;
            dim = t.cols();
            rows.extend_from_slice(t.data());
            idx.extend(pairs.iter().map(|p| p.point + offset));
        }
        offset += s.len() as u32;
    }
    if idx.is_empty() {
        return Ok(None);
    }
    let n = idx.len();
    Ok(Some((idx, Tensor::new(vec![n, dim], rows)?)))
}

fn subsample(scene: Scene, max_points: Option<usize>, r: &mut rng::Rng) -> Scene {
    match max_points {
        Some(m) if scene.len() > m => {
            let mut keep = rand::seq::index::sample(r, scene.len(), m).into_vec();
            keep.sort_unstable();
            scene.select(&keep)
        }
        _ => scene,
    }
}

/// Train `model` on `dataset` (with matching teacher features) using AdamW and a
/// one-cycle schedule. Deterministic in `config.seed`.
pub fn joint_train(
    dataset: &[Scene],
    features: &[SceneFeatures],
    model: &mut ParamStore,
    config: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if features.len() != dataset.len() {
        return Err(Error::Config(format!(
            "{} teacher feature sets for {} scenes",
            features.len(),
            dataset.len()
        )));
    }
    if let Some(f) = features.iter().find(|f| f.dim() != model.config.kd_dim && !f.maps.is_empty()) {
        return Err(Error::Config(format!(
            "teacher width {} does not match KD head width {}",
            f.dim(),
            model.config.kd_dim
        )));
    }
    let steps_per_epoch = dataset.len().div_ceil(config.batch_scenes);
    let total = config.epochs * steps_per_epoch;
    let schedule = config.schedule(total);
    let mut opt = OptimizerState::adamw(AdamHyper {
        lr: config.max_lr,
        weight_decay: config.weight_decay,
        ..AdamHyper::default()
    });
    let mut r = rng::rng(rng::mix(config.seed, rng::tag("train")));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(config.batch_scenes) {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let partner = (dataset.len() > 1).then(|| {
                    let mut j = r.gen_range(0..dataset.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    j
                });
                let a = augment(&dataset[i], partner.map(|j| &dataset[j]), &config.augment, r.gen())?;
                let feats = match partner {
                    Some(j) if a.mixed_with_partner => SceneFeatures {
                        maps: features[i].maps.iter().chain(&features[j].maps).cloned().collect(),
                    },
                    _ => features[i].clone(),
                };
                items.push((subsample(a.scene, config.max_points, &mut r), feats));
            }
            let refs: Vec<&Scene> = items.iter().map(|(s, _)| s).collect();
            let batch = Batch::from_scenes(&refs, model.config.k)?;
            let labels: Vec<usize> = items
                .iter()
                .flat_map(|(s, _)| s.labels.read().iter().map(|&l| l as usize))
                .collect();
            let kd = kd_terms(&items, config.kd_budget, &mut r)?;

            let mut g = Graph::new();
            let (f, stats) = model.backbone(&mut g, &batch, BnMode::Train)?;
            let logits = model.project_labels(&mut g, f)?;
            let ce = g.smoothed_cross_entropy(logits, &labels, config.label_smoothing)?;
            let mut terms = vec![(ce, config.loss_weights[0])];
            let mut l_kd = None;
            if let Some((idx, target)) = &kd {
                let pred = model.project_kd(&mut g, f)?;
                let picked = g.gather_rows(pred, idx)?;
                let loss = g.cosine_distill(picked, target)?;
                l_kd = Some(g.value(loss).item());
                terms.push((loss, config.loss_weights[1]));
            }
            let l_y = g.value(ce).item();
            if !l_y.is_finite() || l_kd.is_some_and(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    l_y,
                    l_kd: l_kd.unwrap_or(f32::NAN),
                });
            }
            let total_loss = g.combine(&terms)?;
            let mut grads = g.backward(total_loss)?;
            model.discard_frozen(&mut grads);
            model.apply_batch_stats(&stats, BN_MOMENTUM);
            let lr = schedule.lr_at(step);
            if lr > 0.0 {
                opt.hyper.lr = lr;
                opt.step(model, &grads)?;
            }
            log.steps.push(StepLog {
                epoch,
                step,
                l_y,
                l_kd,
                lr,
            });
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene() -> Scene {
        use crate::scene::{Correspondence as C, Labels};
        Scene {
            points: vec![[0.0; 3]; 4],
            feats: vec![[0.0, 0.0, 1.0, 0.5, 0.5, 0.5]; 4],
            labels: Labels::new(vec![0, 1, 0, 1]),
            num_classes: 2,
            height: 4,
            width: 4,
            images: vec![vec![0.0; 48]; 2],
            correspondences: vec![
                vec![C { point: 0, u: 0, v: 0 }, C { point: 1, u: 1, v: 0 }],
                vec![C { point: 1, u: 2, v: 2 }, C { point: 2, u: 3, v: 3 }, C { point: 3, u: 0, v: 3 }],
            ],
            cameras: vec![],
        }
    }

    #[test]
    fn full_budget_returns_every_pair() {
        let s = tiny_scene();
        let mut pairs = sample_kd_pairs(&s, 10, 1).unwrap();
        assert_eq!(pairs.len(), 5);
        pairs.sort();
        let mut want: Vec<KdPair> = s
            .correspondences
            .iter()
            .enumerate()
            .flat_map(|(i, cs)| {
                cs.iter().map(move |c| KdPair {
                    point: c.point,
                    image: i,
                    u: c.u,
                    v: c.v,
                })
            })
            .collect();
        want.sort();
        assert_eq!(pairs, want);
    }

    #[test]
    fn budget_one_is_a_real_pair() {
        let s = tiny_scene();
        for seed in 0..20 {
            let p = sample_kd_pairs(&s, 1, seed).unwrap();
            assert_eq!(p.len(), 1);
            let (img, c) = p[0].correspondence();
            assert!(s.correspondences[img].contains(&c));
        }
    }

    #[test]
    fn no_correspondences_signals_skip() {
        let mut s = tiny_scene();
        s.correspondences.iter_mut().for_each(Vec::clear);
        assert!(sample_kd_pairs(&s, 4, 0).is_none());
    }

    #[test]
    fn loss_cases() {
        let uniform = Tensor::zeros(&[3, 8]);
        assert!((loss_ce(&uniform, &[0, 3, 7], 0.0).unwrap() - 8f32.ln()).abs() < 1e-6);
        assert!(loss_ce(&uniform, &[8, 0, 0], 0.0).is_err());
        let p = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]).unwrap();
        assert!((loss_kd(&p, &p).unwrap() + 1.0).abs() < 1e-6);
        let orth = Tensor::from_rows(&[vec![-2.0, 1.0], vec![3.0, 0.0]]).unwrap();
        assert!(loss_kd(&p, &orth).unwrap().abs() < 1e-6);
        assert!(loss_kd(&Tensor::zeros(&[2, 2]), &p).is_err());
    }

    #[test]
    fn epoch_csv() {
        let log = TrainLog {
            steps: vec![
                StepLog { epoch: 0, step: 0, l_y: 2.0, l_kd: Some(-0.5), lr: 0.1 },
                StepLog { epoch: 0, step: 1, l_y: 1.0, l_kd: None, lr: 0.2 },
            ],
        };
        assert_eq!(log.to_csv(), "epoch,L_Y,L_2D,lr\n0,1.5,-0.5,0.2\n");
    }
}

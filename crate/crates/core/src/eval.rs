//! Confusion matrices, mIoU, and the experiment runner comparing source-only,
//! joint training, TENT, DUA and the two TTT variants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{io as scene_io, Scene};
use crate::segnet::{load_checkpoint, ParamStore};
use crate::teacher::{SceneFeatures, SyntheticTeacher, SyntheticTeacherConfig};
use crate::ttt::{
    baseline_dua, baseline_tent, ensemble_predict, ttt_offline, ttt_online, BaselineConfig, OnlineState, TttConfig,
    Variant,
};

/// `C × (C+1)` counts: rows are ground truth, columns predictions, the last
/// column collects predictions outside the evaluated class set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * (classes + 1)],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.classes + 1) + pred]
    }

    pub fn other(&self, gt: usize) -> u64 {
        self.get(gt, self.classes)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Count points whose ground truth is in `mask`; predictions outside `mask`
    /// land in the "other" column.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize], mask: &[usize]) -> Result<()> {
        let pred: Vec<Option<usize>> = pred.iter().map(|&p| Some(p)).collect();
        self.accumulate_mapped(&pred, gt, mask)
    }

    /// As [`accumulate`](Self::accumulate), with `None` meaning a prediction that
    /// maps to no target class.
    pub fn accumulate_mapped(&mut self, pred: &[Option<usize>], gt: &[usize], mask: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Config(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let c = self.classes;
        if let Some(&bad) = pred.iter().flatten().chain(gt).chain(mask).find(|&&v| v >= c) {
            return Err(Error::Tensor(crate::tensor::TensorError::Label { label: bad, classes: c }));
        }
        let mut inside = vec![false; c];
        for &m in mask {
            inside[m] = true;
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if inside[g] {
                let col = match p {
                    Some(p) if inside[p] => p,
                    _ => c,
                };
                self.counts[g * (c + 1) + col] += 1;
            }
        }
        Ok(())
    }

    /// IoU per class in `mask`; `None` when the class never occurs in ground truth
    /// or prediction. Counts come from every accumulated row, so `mask` only picks
    /// which classes are reported.
    pub fn per_class_iou(&self, mask: &[usize]) -> Vec<Option<f64>> {
        mask.iter()
            .map(|&k| {
                let tp = self.get(k, k);
                let row: u64 = (0..=self.classes).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..self.classes).map(|r| self.get(r, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

pub fn accumulate_confusion(pred: &[usize], gt: &[usize], mask: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt, mask)?;
    Ok(cm)
}

/// Mean IoU over the classes in `mask` that occur at all.
pub fn miou(cm: &ConfusionMatrix, mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Metric("empty class mask".into()));
    }
    let ious: Vec<f64> = cm.per_class_iou(mask).into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::Metric("no evaluated class occurs in prediction or ground truth".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SourceOnly,
    JointTrain,
    Tent,
    Dua,
    TttKd,
    TttKdO,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SourceOnly,
        Method::JointTrain,
        Method::Tent,
        Method::Dua,
        Method::TttKd,
        Method::TttKdO,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SourceOnly => "source-only",
            Method::JointTrain => "joint-train",
            Method::Tent => "tent",
            Method::Dua => "dua",
            Method::TttKd => "ttt-kd",
            Method::TttKdO => "ttt-kd-o",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown method `{name}`")))
    }

    /// Whether the method evaluates the source-only checkpoint.
    pub fn uses_source_model(self) -> bool {
        self == Method::SourceOnly
    }
}

/// Everything a method needs at test time.
pub struct MethodSettings<'a> {
    pub ttt: &'a TttConfig,
    pub online: &'a TttConfig,
    pub baselines: &'a BaselineConfig,
}

/// Predictions of one method over a test stream, before any label is looked at.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub predictions: Vec<Vec<usize>>,
    /// Parameter updates performed (gradient steps).
    pub updates: usize,
    /// Ground-truth reads on the test scenes while predicting.
    pub label_reads: u64,
    /// Per-scene, per-step distillation losses of the TTT methods.
    pub kd_curves: Vec<Vec<f32>>,
}

/// Run `method` over `scenes` in order. Label counters are reset first and read
/// back after the last prediction.
pub fn predict_method(
    method: Method,
    model: &ParamStore,
    scenes: &[Scene],
    feats: &[SceneFeatures],
    settings: &MethodSettings,
) -> Result<MethodOutcome> {
    if feats.len() != scenes.len() && matches!(method, Method::TttKd | Method::TttKdO) {
        return Err(Error::Config(format!(
            "{} teacher feature sets for {} scenes",
            feats.len(),
            scenes.len()
        )));
    }
    scenes.iter().for_each(|s| s.labels.reset_reads());
    let mut predictions = Vec::with_capacity(scenes.len());
    let mut updates = 0;
    let mut kd_curves = Vec::new();
    match method {
        Method::SourceOnly | Method::JointTrain => {
            for s in scenes {
                predictions.push(ensemble_predict(model, s, settings.ttt.rotations)?.argmax_rows());
            }
        }
        Method::Tent => {
            let mut m = model.clone();
            for s in scenes {
                let (l, n) = baseline_tent(&mut m, s, settings.baselines)?;
                updates += n;
                predictions.push(l.argmax_rows());
            }
        }
        Method::Dua => {
            let mut m = model.clone();
            for s in scenes {
                predictions.push(baseline_dua(&mut m, s, settings.baselines)?.argmax_rows());
            }
        }
        Method::TttKd => {
            for (s, f) in scenes.iter().zip(feats) {
                let (l, trace) = ttt_offline(model, s, f, settings.ttt)?;
                updates += trace.updates();
                kd_curves.push(trace.mean_loss_per_step());
                predictions.push(l.argmax_rows());
            }
        }
        Method::TttKdO => {
            let mut state = OnlineState::new(model, settings.online.lr);
            for (s, f) in scenes.iter().zip(feats) {
                let (l, trace) = ttt_online(&mut state, s, f, settings.online)?;
                updates += trace.updates();
                kd_curves.push(trace.mean_loss_per_step());
                predictions.push(l.argmax_rows());
            }
        }
    }
    let label_reads = scenes.iter().map(|s| s.labels.reads()).sum();
    Ok(MethodOutcome {
        predictions,
        updates,
        label_reads,
        kd_curves,
    })
}

/// Pooled and per-scene scores of a set of predictions. `class_map[p]` gives the
/// target class of predicted class `p` (identity when absent).
pub fn score(
    predictions: &[Vec<usize>],
    scenes: &[Scene],
    mask: &[usize],
    class_map: Option<&[Option<usize>]>,
) -> Result<(ConfusionMatrix, Vec<Option<f64>>)> {
    let classes = scenes.first().map_or(0, |s| s.num_classes);
    let mut total = ConfusionMatrix::new(classes);
    let mut per_scene = Vec::with_capacity(scenes.len());
    for (p, s) in predictions.iter().zip(scenes) {
        let gt: Vec<usize> = s.labels.read().iter().map(|&l| l as usize).collect();
        let mapped: Vec<Option<usize>> = match class_map {
            Some(m) => p.iter().map(|&k| m.get(k).copied().flatten()).collect(),
            None => p.iter().map(|&k| Some(k)).collect(),
        };
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate_mapped(&mapped, &gt, mask)?;
        per_scene.push(miou(&cm, mask).ok());
        total.merge(&cm);
    }
    Ok((total, per_scene))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSetConfig {
    pub name: String,
    pub scenes: PathBuf,
    /// Directory of `.tttf` caches, or `"synthetic"`.
    #[serde(default = "synthetic")]
    pub teacher: String,
}

fn synthetic() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub source_only: Option<PathBuf>,
    pub joint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Offline steps per rotation (0 = no adaptation).
    Steps,
    /// Online stride (0 = never update).
    Stride,
    /// Images per scene available to distillation.
    Images,
}

impl SweepKind {
    pub fn axis(self) -> &'static str {
        match self {
            SweepKind::Steps => "steps",
            SweepKind::Stride => "stride",
            SweepKind::Images => "images",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub values: Vec<u64>,
    pub test_set: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<String>,
    pub runs: Vec<RunConfig>,
    pub test_sets: Vec<TestSetConfig>,
    /// Shared class ids to evaluate; all classes when absent.
    pub eval_classes: Option<Vec<usize>>,
    /// `[predicted, target]` class pairs; predictions without a pair count as "other".
    pub class_map: Option<Vec<[usize; 2]>>,
    pub ttt: TttConfig,
    pub online: TttConfig,
    pub baselines: BaselineConfig,
    pub teacher: SyntheticTeacherConfig,
    pub sweeps: Vec<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            runs: Vec::new(),
            test_sets: Vec::new(),
            eval_classes: None,
            class_map: None,
            ttt: TttConfig::default(),
            online: TttConfig::online(),
            baselines: BaselineConfig::default(),
            teacher: SyntheticTeacherConfig::default(),
            sweeps: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Dense lookup of `class_map` over `classes` predicted ids.
    pub fn class_lookup(&self, classes: usize) -> Result<Option<Vec<Option<usize>>>> {
        let Some(pairs) = &self.class_map else {
            return Ok(None);
        };
        let mut out = vec![None; classes];
        for &[p, t] in pairs {
            if p >= classes || t >= classes {
                return Err(Error::Config(format!("class_map pair [{p}, {t}] out of range for {classes} classes")));
            }
            if out[p].replace(t).is_some() {
                return Err(Error::Config(format!("class_map maps class {p} twice")));
            }
        }
        Ok(Some(out))
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| Method::parse(m)).collect()
    }

    /// Every referenced path that does not exist.
    pub fn missing_paths(&self, base: &Path) -> Vec<PathBuf> {
        let methods = self.parsed_methods().unwrap_or_default();
        let needs_source = methods.iter().any(|m| m.uses_source_model());
        let needs_joint = methods.iter().any(|m| !m.uses_source_model()) || !self.sweeps.is_empty();
        let mut out = Vec::new();
        let mut check = |p: &Path| {
            let full = base.join(p);
            if !full.exists() {
                out.push(full);
            }
        };
        for r in &self.runs {
            match (&r.source_only, needs_source) {
                (Some(p), true) => check(p),
                (None, true) => check(Path::new(&format!("<run {} source_only unset>", r.seed))),
                _ => {}
            }
            match (&r.joint, needs_joint) {
                (Some(p), true) => check(p),
                (None, true) => check(Path::new(&format!("<run {} joint unset>", r.seed))),
                _ => {}
            }
        }
        for t in &self.test_sets {
            check(&t.scenes);
            if t.teacher != "synthetic" {
                check(Path::new(&t.teacher));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub test_set: String,
    pub seed: u64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub scenes: usize,
    pub per_scene_miou: Vec<Option<f64>>,
    pub updates: usize,
    pub label_reads: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub test_set: String,
    pub seed: u64,
    /// `(x, mIoU)` in the order requested.
    pub points: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub eval_classes: Vec<usize>,
    pub results: Vec<MethodResult>,
    pub sweeps: Vec<SweepResult>,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("report: {e}")))
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        r.results.iter_mut().for_each(|m| m.wall_clock_secs = 0.0);
        r
    }

    /// Mean mIoU over seeds for one method and test set.
    pub fn mean_miou(&self, method: Method, test_set: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.method == method && r.test_set == test_set)
            .map(|r| r.miou)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `test_set,method,seed,scene,miou` rows.
    pub fn per_scene_csv(&self) -> String {
        let mut s = String::from("test_set,method,seed,scene,miou\n");
        for r in &self.results {
            for (i, m) in r.per_scene_miou.iter().enumerate() {
                let v = m.map_or(String::new(), |v| format!("{v}"));
                writeln!(s, "{},{},{},{i},{v}", r.test_set, r.method.name(), r.seed).unwrap();
            }
        }
        s
    }
}

/// Two-column CSV of a sweep (mean over seeds at each x).
pub fn plot_data(report: &EvalReport, kind: SweepKind) -> Result<String> {
    let sweeps: Vec<&SweepResult> = report.sweeps.iter().filter(|s| s.kind == kind).collect();
    let Some(first) = sweeps.first() else {
        return Err(Error::Config(format!("report has no {} sweep", kind.axis())));
    };
    let mut s = format!("{},miou\n", kind.axis());
    for (i, &(x, _)) in first.points.iter().enumerate() {
        let ys: Vec<f64> = sweeps
            .iter()
            .filter(|w| w.test_set == first.test_set)
            .filter_map(|w| w.points.get(i).map(|p| p.1))
            .collect();
        writeln!(s, "{x},{}", ys.iter().sum::<f64>() / ys.len() as f64).unwrap();
    }
    Ok(s)
}

pub fn emit_plot_data(report: &EvalReport, kind: SweepKind, out: &Path) -> Result<()> {
    let csv = plot_data(report, kind)?;
    fs::write(out, csv).map_err(|e| Error::io(out, e))
}

/// Teacher features for a loaded test set. The synthetic teacher reads ground
/// truth, so this runs before any audit window opens.
pub fn test_features(scenes: &[Scene], teacher: &str, cfg: &SyntheticTeacherConfig, base: &Path) -> Result<Vec<SceneFeatures>> {
    if teacher == "synthetic" {
        let t = SyntheticTeacher::new(cfg.clone())?;
        let f = scenes.iter().map(|s| t.scene_features(s)).collect::<std::result::Result<_, _>>()?;
        scenes.iter().for_each(|s| s.labels.reset_reads());
        return Ok(f);
    }
    let dir = base.join(teacher);
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(SceneFeatures::load(&dir, &format!("scene_{i:04}"), s.images.len())?))
        .collect()
}

/// Restrict distillation to the first `n` images of each scene.
fn limit_images(scenes: &[Scene], feats: &[SceneFeatures], n: usize) -> (Vec<Scene>, Vec<SceneFeatures>) {
    let s = scenes
        .iter()
        .map(|s| {
            let mut t = s.clone();
            t.images.truncate(n);
            t.correspondences.truncate(n);
            t.cameras.truncate(n);
            t
        })
        .collect();
    let f = feats
        .iter()
        .map(|f| SceneFeatures {
            maps: f.maps.iter().take(n).cloned().collect(),
        })
        .collect();
    (s, f)
}

/// Evaluate one sweep for one model.
pub fn run_sweep(
    sweep: &SweepConfig,
    model: &ParamStore,
    scenes: &[Scene],
    feats: &[SceneFeatures],
    config: &ExperimentConfig,
    mask: &[usize],
) -> Result<Vec<(u64, f64)>> {
    let mut points = Vec::with_capacity(sweep.values.len());
    for &x in &sweep.values {
        let (method, ttt, online, scenes_x, feats_x) = match sweep.kind {
            SweepKind::Steps if x == 0 => (Method::JointTrain, config.ttt.clone(), config.online.clone(), None, None),
            SweepKind::Steps => (
                Method::TttKd,
                TttConfig {
                    steps: x as usize,
                    ..config.ttt.clone()
                },
                config.online.clone(),
                None,
                None,
            ),
            SweepKind::Stride => (
                Method::TttKdO,
                config.ttt.clone(),
                TttConfig {
                    variant: Variant::Online,
                    stride: (x > 0).then_some(x as usize),
                    ..config.online.clone()
                },
                None,
                None,
            ),
            SweepKind::Images => {
                let (s, f) = limit_images(scenes, feats, x as usize);
                (Method::TttKd, config.ttt.clone(), config.online.clone(), Some(s), Some(f))
            }
        };
        let sc = scenes_x.as_deref().unwrap_or(scenes);
        let fe = feats_x.as_deref().unwrap_or(feats);
        let settings = MethodSettings {
            ttt: &ttt,
            online: &online,
            baselines: &config.baselines,
        };
        let out = predict_method(method, model, sc, fe, &settings)?;
        let lookup = config.class_lookup(model.config.num_classes)?;
        let (cm, _) = score(&out.predictions, scenes, mask, lookup.as_deref())?;
        points.push((x, miou(&cm, mask)?));
    }
    Ok(points)
}

/// Run every requested method on every test set for every run. Paths resolve
/// against `base`.
pub fn run_experiment(config: &ExperimentConfig, base: &Path) -> Result<EvalReport> {
    let start = Instant::now();
    let methods = config.parsed_methods()?;
    let missing = config.missing_paths(base);
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Config(format!("missing paths: {}", list.join(", "))));
    }
    if config.runs.is_empty() || config.test_sets.is_empty() {
        return Err(Error::Config("need at least one run and one test set".into()));
    }
    let mut sets = BTreeMap::new();
    for t in &config.test_sets {
        let scenes = scene_io::load_dir(&base.join(&t.scenes))?;
        if scenes.is_empty() {
            return Err(Error::Config(format!("test set `{}` has no scenes", t.name)));
        }
        let feats = if methods.iter().any(|m| matches!(m, Method::TttKd | Method::TttKdO)) || !config.sweeps.is_empty() {
            test_features(&scenes, &t.teacher, &config.teacher, base)?
        } else {
            Vec::new()
        };
        sets.insert(t.name.clone(), (scenes, feats));
    }
    let classes = sets.values().next().map_or(0, |(s, _)| s[0].num_classes);
    let mask = config.eval_classes.clone().unwrap_or_else(|| (0..classes).collect());
    let lookup = config.class_lookup(classes)?;
    let settings = MethodSettings {
        ttt: &config.ttt,
        online: &config.online,
        baselines: &config.baselines,
    };
    let mut results = Vec::new();
    let mut sweeps = Vec::new();
    for run in &config.runs {
        let load = |p: &Option<PathBuf>| -> Result<Option<ParamStore>> {
            p.as_ref().map(|p| Ok(load_checkpoint(&base.join(p))?.store)).transpose()
        };
        let source = load(&run.source_only)?;
        let joint = load(&run.joint)?;
        for t in &config.test_sets {
            let (scenes, feats) = &sets[&t.name];
            for &m in &methods {
                let model = if m.uses_source_model() { &source } else { &joint };
                let model = model.as_ref().expect("checked by missing_paths");
                let mut ttt = config.ttt.clone();
                ttt.seed = ttt.seed.wrapping_add(run.seed);
                let mut online = config.online.clone();
                online.seed = online.seed.wrapping_add(run.seed);
                let s = MethodSettings {
                    ttt: &ttt,
                    online: &online,
                    ..settings
                };
                let t0 = Instant::now();
                let out = predict_method(m, model, scenes, feats, &s)?;
                let secs = t0.elapsed().as_secs_f64();
                let (cm, per_scene) = score(&out.predictions, scenes, &mask, lookup.as_deref())?;
                results.push(MethodResult {
                    method: m,
                    test_set: t.name.clone(),
                    seed: run.seed,
                    per_class_iou: cm.per_class_iou(&mask),
                    miou: miou(&cm, &mask)?,
                    scenes: scenes.len(),
                    per_scene_miou: per_scene,
                    updates: out.updates,
                    label_reads: out.label_reads,
                    wall_clock_secs: secs,
                });
            }
        }
        for sw in &config.sweeps {
            let (scenes, feats) = sets
                .get(&sw.test_set)
                .ok_or_else(|| Error::Config(format!("sweep refers to unknown test set `{}`", sw.test_set)))?;
            let model = joint.as_ref().ok_or_else(|| Error::Config("sweeps need a joint checkpoint".into()))?;
            sweeps.push(SweepResult {
                kind: sw.kind,
                test_set: sw.test_set.clone(),
                seed: run.seed,
                points: run_sweep(sw, model, scenes, feats, config, &mask)?,
            });
        }
    }
    Ok(EvalReport {
        config: config.clone(),
        seeds: config.runs.iter().map(|r| r.seed).collect(),
        eval_classes: mask,
        results,
        sweeps,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_when_perfect() {
        let gt = [0, 1, 2, 2, 1];
        let cm = accumulate_confusion(&gt, &gt, &[0, 1, 2], 3).unwrap();
        assert_eq!((0..3).map(|i| cm.get(i, i)).sum::<u64>(), 5);
        assert_eq!(cm.total(), 5);
        assert_eq!(miou(&cm, &[0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn empty_mask_counts_nothing() {
        let cm = accumulate_confusion(&[0, 1], &[1, 0], &[], 2).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(miou(&cm, &[]).is_err());
    }

    #[test]
    fn hand_cases() {
        // gt A A B B, pred A A A B: one B point predicted as A
        let cm = accumulate_confusion(&[0, 0, 0, 1], &[0, 0, 1, 1], &[0, 1], 2).unwrap();
        assert_eq!(cm.get(0, 0), 2);
        assert_eq!(cm.get(1, 0), 1);
        assert_eq!(cm.get(1, 1), 1);
        // class A: TP 2, FP 1; class B: TP 1, FN 1
        let iou = cm.per_class_iou(&[0, 1]);
        assert_eq!(iou, vec![Some(2.0 / 3.0), Some(0.5)]);
        // TP=1,FP=1 for A; TP=1,FN=1 for B
        let cm = accumulate_confusion(&[0, 0, 1], &[0, 1, 1], &[0, 1], 2).unwrap();
        assert_eq!(miou(&cm, &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn predictions_outside_mask_go_to_other() {
        let cm = accumulate_confusion(&[2, 0], &[0, 0], &[0, 1], 3).unwrap();
        assert_eq!(cm.other(0), 1);
        assert_eq!(cm.per_class_iou(&[0, 1]), vec![Some(0.5), None]);
    }

    #[test]
    fn rejects_bad_ids_and_unknown_methods() {
        assert!(accumulate_confusion(&[3], &[0], &[0], 3).is_err());
        assert!(Method::parse("mean-teacher").unwrap_err().to_string().contains("mean-teacher"));
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
    }

    #[test]
    fn plot_rows_follow_sweep() {
        let report = EvalReport {
            config: ExperimentConfig::default(),
            seeds: vec![0],
            eval_classes: vec![0],
            results: vec![],
            sweeps: vec![SweepResult {
                kind: SweepKind::Steps,
                test_set: "t".into(),
                seed: 0,
                points: vec![(0, 0.5), (1, 0.6), (10, 0.7)],
            }],
            wall_clock_secs: 0.0,
        };
        assert_eq!(plot_data(&report, SweepKind::Steps).unwrap(), "steps,miou\n0,0.5\n1,0.6\n10,0.7\n");
        assert!(plot_data(&report, SweepKind::Stride).is_err());
        let back = EvalReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use tttkd::eval::{miou, predict_method, score, accumulate_confusion, Method, MethodOutcome, MethodSettings};
use tttkd::scene::{apply_shift, generate_scene, Scene, SceneSpec, ShiftProfile};
use tttkd::segnet::{Batch, Group, ModelConfig, ParamStore};
use tttkd::teacher::{SceneFeatures, SyntheticTeacher, SyntheticTeacherConfig};
use tttkd::tensor::checks::layer_suite;
use tttkd::trainer::{joint_train, TrainConfig};
use tttkd::ttt::{
    baseline_dua, baseline_tent, ensemble_predict, ttt_offline, ttt_offline_adapted, ttt_online, BaselineConfig,
    OnlineState, TttConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Gradient oracle.
const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

// Benchmark.
const SOURCE_SCENES: u64 = 40;
const TARGET_SCENES: u64 = 20;
const SEEDS: u64 = 3;
const EPOCHS: usize = 40;
const TTT_STEPS: usize = 10;
const TTT_LR: f32 = 0.1;
const ROTATIONS: usize = 4;
const MARGIN_OVER_JOINT: f64 = 3.0;
const ID_SLACK: f64 = 0.5;
const DESCENT_FRACTION: f64 = 0.8;
const BENCH_BUDGET: Duration = Duration::from_secs(15 * 60);

// Seed-mean mIoU (points) of the first verified run, and the drift allowed before the
// run counts as a regression.
const BASELINE: [(&str, f64); 6] = [
    ("source-only", 32.07),
    ("joint-train", 33.37),
    ("tent", 49.76),
    ("dua", 43.92),
    ("ttt-kd", 64.60),
    ("ttt-kd-o", 62.66),
];
const BASELINE_DRIFT: f64 = 2.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn small_model(seed: u64) -> ParamStore {
    let cfg = ModelConfig {
        widths: vec![16, 16],
        hidden: 16,
        ..Default::default()
    };
    ParamStore::init(cfg, seed).unwrap()
}

fn small_scenes(n: u64, base: u64) -> Vec<Scene> {
    let spec = SceneSpec {
        points: [250, 350],
        ..Default::default()
    };
    (0..n).map(|i| generate_scene(&spec, base + i).unwrap()).collect()
}

fn features(scenes: &[Scene]) -> Vec<SceneFeatures> {
    let t = SyntheticTeacher::new(SyntheticTeacherConfig::default()).unwrap();
    let f = scenes.iter().map(|s| t.scene_features(s).unwrap()).collect();
    scenes.iter().for_each(|s| s.labels.reset_reads());
    f
}

fn quick_ttt() -> TttConfig {
    TttConfig {
        steps: 3,
        rotations: 2,
        ..Default::default()
    }
}

fn gradient_oracle() -> Verdict {
    let t = Instant::now();
    let suite = layer_suite(0..GRAD_SEEDS).unwrap();
    let elapsed = t.elapsed();
    let worst = suite
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap();
    let bad: Vec<_> = suite.iter().filter(|(_, r)| r.max_rel_error >= GRAD_TOL).map(|(n, _)| *n).collect();
    verdict(
        bad.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} layers x {GRAD_SEEDS} seeds, worst {} {:.2e} < {GRAD_TOL:e}, {:.2?}{}",
            suite.len(),
            worst.0,
            worst.1.max_rel_error,
            elapsed,
            if bad.is_empty() { String::new() } else { format!(", failing: {bad:?}") }
        ),
    )
}

fn freezing_contracts() -> Verdict {
    let model = small_model(1);
    let scenes = small_scenes(3, 10);
    let feats = features(&scenes);
    let mut fails = Vec::new();

    let before = model.clone();
    let (_, _, adapted) = ttt_offline_adapted(&model, &scenes[0], &feats[0], &quick_ttt()).unwrap();
    for g in [Group::ProjLabel, Group::ProjKd] {
        if !adapted.group_bitwise_eq(&model, g) {
            fails.push(format!("offline changed {g:?}"));
        }
    }
    if !adapted.buffers_bitwise_eq(&model) {
        fails.push("offline changed BN buffers".into());
    }
    if adapted.group_bitwise_eq(&model, Group::Backbone) {
        fails.push("offline left the backbone untouched".into());
    }
    if !model.bitwise_eq(&before) {
        fails.push("offline modified the caller's model".into());
    }

    let mut state = OnlineState::new(&model, 0.1);
    let online = TttConfig {
        rotations: 2,
        ..TttConfig::online()
    };
    for (s, f) in scenes.iter().zip(&feats) {
        ttt_online(&mut state, s, f, &online).unwrap();
    }
    for g in [Group::ProjLabel, Group::ProjKd] {
        if !state.model.group_bitwise_eq(&model, g) {
            fails.push(format!("online changed {g:?}"));
        }
    }
    if !state.model.buffers_bitwise_eq(&model) {
        fails.push("online changed BN buffers".into());
    }

    let bc = BaselineConfig {
        rotations: 2,
        ..Default::default()
    };
    let mut dua = model.clone();
    for s in &scenes {
        baseline_dua(&mut dua, s, &bc).unwrap();
    }
    if !dua.params_bitwise_eq(&model) {
        fails.push("DUA changed weights".into());
    }
    if dua.buffers_bitwise_eq(&model) {
        fails.push("DUA left BN buffers untouched".into());
    }

    let mut tent = model.clone();
    for s in &scenes {
        baseline_tent(&mut tent, s, &bc).unwrap();
    }
    let affine = model.bn_affine_names();
    for (name, t) in model.param_tensors() {
        let same = t.bitwise_eq(tent.tensor(&name));
        match (affine.contains(&name), same) {
            (false, false) => fails.push(format!("TENT changed {name}")),
            (true, true) => fails.push(format!("TENT left {name} unchanged")),
            _ => {}
        }
    }
    if !tent.buffers_bitwise_eq(&model) {
        fails.push("TENT changed BN buffers".into());
    }
    verdict(
        fails.is_empty(),
        if fails.is_empty() {
            "offline/online projectors + buffers, DUA weights, TENT non-affine: bitwise equal".into()
        } else {
            fails.join("; ")
        },
    )
}

fn offline_statelessness() -> Verdict {
    let model = small_model(2);
    let scenes = small_scenes(20, 200);
    let feats = features(&scenes);
    let cfg = quick_ttt();
    let forward: Vec<_> = scenes
        .iter()
        .zip(&feats)
        .map(|(s, f)| ttt_offline(&model, s, f, &cfg).unwrap().0)
        .collect();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut diff = 0;
    for &i in &order {
        let l = ttt_offline(&model, &scenes[i], &feats[i], &cfg).unwrap().0;
        if !l.bitwise_eq(&forward[i]) {
            diff += 1;
        }
    }
    verdict(diff == 0, format!("20 scenes, permuted order: {diff} scenes with differing logit bytes"))
}

fn stride_arithmetic() -> Verdict {
    let model = small_model(3);
    let scenes = small_scenes(12, 300);
    let feats = features(&scenes);
    let r = 2;
    let mut parts = Vec::new();
    let mut ok = true;
    for s in [1usize, 2, 5] {
        let cfg = TttConfig {
            rotations: r,
            stride: Some(s),
            ..TttConfig::online()
        };
        let mut state = OnlineState::new(&model, cfg.lr);
        let updates: usize = scenes
            .iter()
            .zip(&feats)
            .map(|(sc, f)| ttt_online(&mut state, sc, f, &cfg).unwrap().1.updates())
            .sum();
        let expected = 12usize.div_ceil(s) * r;
        ok &= updates == expected;
        parts.push(format!("s={s}: {updates}/{expected}"));
    }
    verdict(ok, format!("updates over 12 scenes, R={r}: {}", parts.join(", ")))
}

fn rotation_ensembling() -> Verdict {
    let model = small_model(4);
    let scene = &small_scenes(1, 400)[0];
    let mut ok = true;
    for r in [1usize, 2, 3, 8] {
        let got = ensemble_predict(&model, scene, r).unwrap();
        let mut acc: Option<Vec<f32>> = None;
        for i in 0..r {
            let angle = (std::f64::consts::TAU * i as f64 / r as f64) as f32;
            let rotated = scene.rotate_up(angle);
            let l = model.predict(&Batch::from_scene(&rotated, model.config.k).unwrap()).unwrap();
            match acc.as_mut() {
                None => acc = Some(l.data().to_vec()),
                Some(a) => a.iter_mut().zip(l.data()).for_each(|(a, b)| *a += b),
            }
        }
        let acc = acc.unwrap();
        ok &= got.data().len() == acc.len() && got.data().iter().zip(&acc).all(|(a, b)| a.to_bits() == b.to_bits());
        if r == 1 {
            let single = model.predict(&Batch::from_scene(scene, model.config.k).unwrap()).unwrap();
            ok &= got.bitwise_eq(&single);
        }
    }
    verdict(ok, "R in {1,2,3,8}: ensemble == sum of independent eval forwards, bitwise; R=1 == single forward")
}

/// IoU from explicit index sets.
fn set_miou(pred: &[usize], gt: &[usize], classes: usize) -> Option<f64> {
    use std::collections::BTreeSet;
    let mut ious = Vec::new();
    for c in 0..classes {
        let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
        let g: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        let union = p.union(&g).count();
        if union > 0 {
            ious.push(p.intersection(&g).count() as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

fn miou_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let classes = rng.gen_range(2..10);
        let n = rng.gen_range(1..300);
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let mask: Vec<usize> = (0..classes).collect();
        let cm = accumulate_confusion(&pred, &gt, &mask, classes).unwrap();
        if miou(&cm, &mask).ok() != set_miou(&pred, &gt, classes) {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("100 random label arrays: {mismatches} mismatches against set-based IoU"))
}

struct SeedRun {
    shifted: Vec<(Method, MethodOutcome, f64)>,
    id: Vec<(Method, MethodOutcome, f64)>,
}

struct Bench {
    runs: Vec<SeedRun>,
    elapsed: Duration,
    audit_control: u64,
}

impl Bench {
    fn mean(&self, m: Method, shifted: bool) -> f64 {
        let v: Vec<f64> = self
            .runs
            .iter()
            .map(|r| {
                let set = if shifted { &r.shifted } else { &r.id };
                set.iter().find(|x| x.0 == m).unwrap().2
            })
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn evaluate(
    methods: &[Method],
    source: &ParamStore,
    joint: &ParamStore,
    scenes: &[Scene],
    feats: &[SceneFeatures],
    seed: u64,
) -> Vec<(Method, MethodOutcome, f64)> {
    let ttt = TttConfig {
        steps: TTT_STEPS,
        lr: TTT_LR,
        rotations: ROTATIONS,
        seed,
        ..Default::default()
    };
    let online = TttConfig {
        lr: TTT_LR,
        rotations: ROTATIONS,
        seed,
        ..TttConfig::online()
    };
    let baselines = BaselineConfig {
        rotations: ROTATIONS,
        ..Default::default()
    };
    let settings = MethodSettings {
        ttt: &ttt,
        online: &online,
        baselines: &baselines,
    };
    let mask: Vec<usize> = (0..scenes[0].num_classes).collect();
    methods
        .iter()
        .map(|&m| {
            let model = if m == Method::SourceOnly { source } else { joint };
            let out = predict_method(m, model, scenes, feats, &settings).unwrap();
            let (cm, _) = score(&out.predictions, scenes, &mask, None).unwrap();
            let v = 100.0 * miou(&cm, &mask).unwrap();
            (m, out, v)
        })
        .collect()
}

fn benchmark() -> Bench {
    let t = Instant::now();
    let spec = SceneSpec::default();
    let source: Vec<Scene> = (0..SOURCE_SCENES).map(|i| generate_scene(&spec, 1000 + i).unwrap()).collect();
    let target_id: Vec<Scene> = (0..TARGET_SCENES).map(|i| generate_scene(&spec, 5000 + i).unwrap()).collect();
    let profile = ShiftProfile::preset("sensor-A").unwrap();
    let shifted: Vec<Scene> = target_id
        .iter()
        .enumerate()
        .map(|(i, s)| apply_shift(s, &profile, i as u64).unwrap())
        .collect();
    let f_source = features(&source);
    let f_shifted = features(&shifted);
    let f_id = features(&target_id);
    let mut runs = Vec::new();
    for seed in 0..SEEDS {
        let train = |weights: [f32; 2]| {
            let mut m = ParamStore::init(ModelConfig::default(), seed).unwrap();
            let cfg = TrainConfig {
                epochs: EPOCHS,
                loss_weights: weights,
                seed,
                ..Default::default()
            };
            joint_train(&source, &f_source, &mut m, &cfg).unwrap();
            m
        };
        let src_model = train([1.0, 0.0]);
        let joint_model = train([1.0, 1.0]);
        let shifted_res = evaluate(&Method::ALL, &src_model, &joint_model, &shifted, &f_shifted, seed);
        let id_res = evaluate(
            &[Method::JointTrain, Method::TttKd],
            &src_model,
            &joint_model,
            &target_id,
            &f_id,
            seed,
        );
        let line: Vec<String> = shifted_res.iter().map(|(m, _, v)| format!("{} {v:.2}", m.name())).collect();
        eprintln!("  seed {seed} shifted: {}", line.join(", "));
        let line: Vec<String> = id_res.iter().map(|(m, _, v)| format!("{} {v:.2}", m.name())).collect();
        eprintln!("  seed {seed} in-distribution: {}", line.join(", "));
        runs.push(SeedRun {
            shifted: shifted_res,
            id: id_res,
        });
    }
    // positive control: scoring does read labels
    shifted.iter().for_each(|s| s.labels.reset_reads());
    let mask: Vec<usize> = (0..8).collect();
    let dummy: Vec<Vec<usize>> = shifted.iter().map(|s| vec![0; s.len()]).collect();
    score(&dummy, &shifted, &mask, None).unwrap();
    let audit_control = shifted.iter().map(|s| s.labels.reads()).sum();
    Bench {
        runs,
        elapsed: t.elapsed(),
        audit_control,
    }
}

fn shift_benchmark(b: &Bench) -> Verdict {
    let m = |x| b.mean(x, true);
    let (src, joint, tent, dua, ttt) = (
        m(Method::SourceOnly),
        m(Method::JointTrain),
        m(Method::Tent),
        m(Method::Dua),
        m(Method::TttKd),
    );
    let orderings = [
        ("joint >= source-only", joint >= src),
        ("ttt-kd >= joint + 3", ttt >= joint + MARGIN_OVER_JOINT),
        ("ttt-kd >= tent", ttt >= tent),
        ("ttt-kd >= dua", ttt >= dua),
    ];
    let drift: Vec<String> = BASELINE
        .iter()
        .filter_map(|&(name, base)| {
            let v = m(Method::parse(name).unwrap());
            ((v - base).abs() > BASELINE_DRIFT).then(|| format!("{name} {v:.2} vs recorded {base:.2}"))
        })
        .collect();
    let failed: Vec<&str> = orderings.iter().filter(|o| !o.1).map(|o| o.0).collect();
    let pass = failed.is_empty() && drift.is_empty() && b.elapsed < BENCH_BUDGET;
    let mut detail = format!(
        "seed-mean mIoU src {src:.2}, joint {joint:.2}, tent {tent:.2}, dua {dua:.2}, ttt-kd {ttt:.2}, ttt-kd-o {:.2}; \
         margins joint-src {:+.2}, ttt-joint {:+.2}, ttt-tent {:+.2}, ttt-dua {:+.2}; {:.0?}",
        m(Method::TttKdO),
        joint - src,
        ttt - joint,
        ttt - tent,
        ttt - dua,
        b.elapsed
    );
    if !failed.is_empty() {
        detail += &format!("; failed: {}", failed.join(", "));
    }
    if !drift.is_empty() {
        detail += &format!("; drift: {}", drift.join(", "));
    }
    verdict(pass, detail)
}

fn id_improvement(b: &Bench) -> Verdict {
    let joint = b.mean(Method::JointTrain, false);
    let ttt = b.mean(Method::TttKd, false);
    verdict(
        ttt >= joint - ID_SLACK,
        format!("unshifted target seed-mean: ttt-kd {ttt:.2} vs joint {joint:.2} ({:+.2})", ttt - joint),
    )
}

fn per_step_descent(b: &Bench) -> Verdict {
    let mut total = 0;
    let mut good = 0;
    for run in &b.runs {
        let out = &run.shifted.iter().find(|x| x.0 == Method::TttKd).unwrap().1;
        for curve in &out.kd_curves {
            let first = &curve[..curve.len().min(10)];
            total += 1;
            if first.windows(2).all(|w| w[1] <= w[0]) {
                good += 1;
            }
        }
    }
    let frac = good as f64 / total as f64;
    verdict(
        frac >= DESCENT_FRACTION,
        format!("{good}/{total} (scene, seed) pairs with non-increasing mean KD loss over 10 steps ({:.0}%)", 100.0 * frac),
    )
}

fn no_leakage(b: &Bench) -> Verdict {
    let mut reads = 0;
    let mut paths = 0;
    for run in &b.runs {
        for (_, out, _) in run.shifted.iter().chain(&run.id) {
            reads += out.label_reads;
            paths += 1;
        }
    }
    verdict(
        reads == 0 && b.audit_control > 0,
        format!(
            "{paths} method runs: {reads} label reads at test time (audit control registered {})",
            b.audit_control
        ),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(u8, &str, Verdict)> = vec![
        (1, "gradient oracle", gradient_oracle()),
        (2, "freezing contracts", freezing_contracts()),
        (3, "offline statelessness", offline_statelessness()),
        (4, "stride arithmetic", stride_arithmetic()),
        (5, "rotation ensembling", rotation_ensembling()),
        (6, "miou oracle", miou_oracle()),
    ];
    for (id, name, v) in &results {
        println!("[{}] {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    eprintln!("running shift benchmark ({SEEDS} seeds, {EPOCHS} epochs, {TTT_STEPS} TTT steps, R={ROTATIONS})");
    let bench = benchmark();
    let later = vec![
        (7, "shift benchmark", shift_benchmark(&bench)),
        (8, "in-distribution non-degradation", id_improvement(&bench)),
        (9, "per-step descent", per_step_descent(&bench)),
        (10, "no-leakage audit", no_leakage(&bench)),
    ];
    for (id, name, v) in &later {
        println!("[{}] {id:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    results.extend(later);
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "acceptance: {}/{} passed in {:.0?}",
        results.len() - failed,
        results.len(),
        start.elapsed()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use std::fs;
use std::path::Path;
use std::process::Command;

use tttkd::eval::{run_experiment, ExperimentConfig, Method};
use tttkd::scene::io::save_dir;
use tttkd::scene::{generate_scene, AugmentConfig, Scene, SceneSpec};
use tttkd::segnet::{encode_checkpoint, save_checkpoint, snapshot, ModelConfig, ParamStore};
use tttkd::teacher::{SceneFeatures, SyntheticTeacher, SyntheticTeacherConfig};
use tttkd::trainer::{joint_train, TrainConfig};
use tttkd::ttt::{ttt_online, OnlineState, TttConfig};

fn spec() -> SceneSpec {
    SceneSpec {
        points: [200, 260],
        cameras: 2,
        image_height: 32,
        image_width: 32,
        ..Default::default()
    }
}

fn scenes(n: u64, base: u64) -> Vec<Scene> {
    (0..n).map(|i| generate_scene(&spec(), base + i).unwrap()).collect()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        widths: vec![32, 32],
        hidden: 32,
        ..Default::default()
    }
}

fn feats(s: &[Scene]) -> Vec<SceneFeatures> {
    let t = SyntheticTeacher::new(SyntheticTeacherConfig::default()).unwrap();
    s.iter().map(|x| t.scene_features(x).unwrap()).collect()
}

fn train(data: &[Scene], f: &[SceneFeatures], epochs: usize, weights: [f32; 2], max_lr: f32, seed: u64) -> ParamStore {
    let mut m = ParamStore::init(small_config(), seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        loss_weights: weights,
        batch_scenes: 1,
        max_lr,
        augment: AugmentConfig::none(),
        seed,
        ..Default::default()
    };
    joint_train(data, f, &mut m, &cfg).unwrap();
    m
}

#[test]
fn training_is_reproducible() {
    let data = scenes(3, 10);
    let f = feats(&data);
    let a = train(&data, &f, 2, [1.0, 1.0], 0.01, 5);
    let b = train(&data, &f, 2, [1.0, 1.0], 0.01, 5);
    assert_eq!(encode_checkpoint(&snapshot(&a, None)), encode_checkpoint(&snapshot(&b, None)));
    let c = train(&data, &f, 2, [1.0, 1.0], 0.01, 6);
    assert_ne!(encode_checkpoint(&snapshot(&a, None)), encode_checkpoint(&snapshot(&c, None)));
}

#[test]
fn online_state_depends_only_on_the_prefix() {
    let model = ParamStore::init(small_config(), 1).unwrap();
    let data = scenes(4, 40);
    let f = feats(&data);
    let cfg = TttConfig {
        rotations: 2,
        ..TttConfig::online()
    };
    let mut a = OnlineState::new(&model, cfg.lr);
    let mut b = OnlineState::new(&model, cfg.lr);
    for i in 0..3 {
        ttt_online(&mut a, &data[i], &f[i], &cfg).unwrap();
        ttt_online(&mut b, &data[i], &f[i], &cfg).unwrap();
    }
    assert!(a.model.bitwise_eq(&b.model));
    ttt_online(&mut a, &data[3], &f[3], &cfg).unwrap();
    assert!(!a.model.bitwise_eq(&b.model));
}

fn write_experiment(dir: &Path, methods: &[&str], rotations: usize) -> ExperimentConfig {
    let list: Vec<String> = methods.iter().map(|m| format!("\"{m}\"")).collect();
    let text = format!(
        r#"
methods = [{}]

[[runs]]
seed = 0
source_only = "src.ckpt"
joint = "src.ckpt"

[[test_sets]]
name = "train"
scenes = "train"

[ttt]
steps = 2
rotations = {rotations}

[online]
variant = "online"
steps = 1
rotations = 2

[baselines]
rotations = 2
"#,
        list.join(", "),
    );
    fs::write(dir.join("exp.toml"), &text).unwrap();
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn experiment_runner_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(2, 70);
    let f = feats(&data);
    let model = train(&data, &f, 150, [1.0, 0.0], 0.05, 0);
    save_checkpoint(&snapshot(&model, None), &dir.path().join("src.ckpt")).unwrap();
    save_dir(&data, &dir.path().join("train")).unwrap();

    // overfit sanity: source-only on its own training scenes, single pose since
    // training saw no rotations
    let cfg = write_experiment(dir.path(), &["source-only"], 1);
    let rep = run_experiment(&cfg, dir.path()).unwrap();
    let r = &rep.results[0];
    assert_eq!(r.method, Method::SourceOnly);
    assert_eq!(r.updates, 0);
    assert_eq!(r.label_reads, 0);
    assert!(r.miou > 0.9, "overfit mIoU {}", r.miou);
    assert_eq!(rep.config, cfg);

    // deterministic modulo wall-clock
    let cfg = write_experiment(dir.path(), &["source-only", "tent", "dua", "ttt-kd", "ttt-kd-o"], 2);
    let a = run_experiment(&cfg, dir.path()).unwrap();
    let b = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(a.without_timing().to_json(), b.without_timing().to_json());
    assert!(a.results.iter().all(|r| r.label_reads == 0));
    assert!(a.results.iter().find(|r| r.method == Method::TttKd).unwrap().updates > 0);
}

#[test]
fn experiment_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = write_experiment(dir.path(), &["source-only"], 2);
    let err = run_experiment(&cfg, dir.path()).unwrap_err().to_string();
    assert!(err.contains("src.ckpt") && err.contains("train"), "{err}");
    cfg.methods = vec!["source-only".into(), "pseudo-label".into()];
    let err = run_experiment(&cfg, dir.path()).unwrap_err().to_string();
    assert!(err.contains("pseudo-label"), "{err}");
}

fn cli(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_tttkd"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn cli_round_trip_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.toml"), "points = [150, 200]\ncameras = 2\nimage_height = 24\nimage_width = 24\n").unwrap();
    assert_eq!(cli(d, &["gen-scenes", "--spec", "spec.toml", "--count", "3", "--seed", "1", "--out", "src"]).0, 0);
    assert_eq!(cli(d, &["shift", "--profile", "sensor-B", "--in", "src", "--out", "tgt"]).0, 0);
    assert_eq!(cli(d, &["teacher", "--scenes", "tgt", "--out", "feats"]).0, 0);
    fs::write(d.join("train.toml"), "[train]\nepochs = 1\n[model]\nwidths = [16, 16]\nhidden = 16\n").unwrap();
    let (code, text) = cli(d, &["train", "--config", "train.toml", "--scenes", "src", "--out", "m.ckpt", "--epochs", "2"]);
    assert_eq!(code, 0, "{text}");
    let log = fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(log.starts_with("epoch,L_Y,L_2D,lr\n"));
    assert_eq!(log.lines().count(), 3, "flag overrides the config's epoch count");
    let (code, text) = cli(
        d,
        &[
            "ttt", "--model", "m.ckpt", "--scenes", "tgt", "--teacher", "feats", "--steps", "2", "--rotations", "2",
            "--report", "r.json", "--trace", "t.csv",
        ],
    );
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("mIoU"));
    let trace = fs::read_to_string(d.join("t.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3 * 2 * 2);
    assert!(fs::read_to_string(d.join("r.json")).unwrap().contains("\"label_reads\": 0"));

    assert_eq!(cli(d, &["ttt", "--model", "missing.ckpt", "--scenes", "tgt"]).0, 4);
    assert_eq!(cli(d, &["shift", "--profile", "nope", "--in", "src", "--out", "x"]).0, 2);
    assert_eq!(cli(d, &["ttt", "--model", "m.ckpt", "--scenes", "tgt", "--rotations", "0"]).0, 2);
    fs::write(d.join("bad.toml"), "[train]\nepochs = \"many\"\n").unwrap();
    assert_eq!(cli(d, &["train", "--config", "bad.toml", "--scenes", "src", "--out", "z.ckpt"]).0, 2);
    fs::write(d.join("corrupt.ckpt"), b"TTTC\x01").unwrap();
    assert_eq!(cli(d, &["ttt", "--model", "corrupt.ckpt", "--scenes", "tgt"]).0, 4);
    let (code, text) = cli(d, &["grad-check", "--seeds", "2"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("bn-frozen-stats-train"));
}

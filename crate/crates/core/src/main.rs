use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use tttkd::eval::{
    emit_plot_data, run_experiment, score, test_features, miou, EvalReport, ExperimentConfig, Method, MethodResult,
    SweepConfig, SweepKind,
};
use tttkd::scene::io as scene_io;
use tttkd::scene::{apply_shift, generate_scene, SceneSpec, ShiftProfile};
use tttkd::segnet::{load_checkpoint, save_checkpoint, snapshot, ModelConfig, ParamStore};
use tttkd::teacher::{SyntheticTeacher, SyntheticTeacherConfig};
use tttkd::tensor::checks::{layer_suite, LAYERS};
use tttkd::trainer::{joint_train, TrainConfig};
use tttkd::ttt::{ttt_offline, ttt_online, OnlineState, TttConfig, Variant};
use tttkd::{Error, Result};

#[derive(Parser)]
#[command(name = "tttkd", version, about = "Test-time training of point-cloud segmentation by 2D feature distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labelled synthetic scenes.
    GenScenes {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a named or file-defined domain shift to a scene directory.
    Shift {
        /// Preset name, or a TOML file with the profile fields.
        #[arg(long)]
        profile: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Precompute teacher feature caches.
    Teacher {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; a zero distillation weight gives the source-only baseline.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenes: PathBuf,
        /// Feature cache directory, or `synthetic`.
        #[arg(long, default_value = "synthetic")]
        teacher: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_lr: Option<f32>,
        #[arg(long)]
        kd_weight: Option<f32>,
        /// Training log CSV; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adapt at test time and report mIoU.
    Ttt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value = "synthetic")]
        teacher: String,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        rotations: Option<usize>,
        /// Online update stride; `inf` never updates.
        #[arg(long)]
        stride: Option<String>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        online_steps_total: bool,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-step trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run an experiment config and write the report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated method names; overrides the config.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Per-scene mIoU CSV; defaults to the report path with `.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sweep one adaptation setting and write plot data.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Comma-separated sweep values.
        #[arg(long)]
        values: String,
        /// Test set name; defaults to the first in the config.
        #[arg(long)]
        test_set: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Room,
    OutdoorLite,
    FloorOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Offline,
    Online,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Steps,
    Stride,
    Images,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    train: TrainConfig,
    model: ModelConfig,
    teacher: SyntheticTeacherConfig,
    init_seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TttFile {
    ttt: TttConfig,
    teacher: SyntheticTeacherConfig,
}

fn read_toml<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_stride(s: &str) -> Result<Option<usize>> {
    if s == "inf" {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(Error::Config(format!("stride `{s}` must be a positive integer or `inf`"))),
        Ok(v) => Ok(Some(v)),
    }
}

fn parse_values(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad sweep value `{v}`"))))
        .collect()
}

fn config_base(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenes {
            spec,
            preset,
            count,
            seed,
            out,
        } => {
            let spec: SceneSpec = match (spec, preset) {
                (Some(p), _) => read_toml(Some(&p))?,
                (None, Some(Preset::OutdoorLite)) => SceneSpec::outdoor_lite(),
                (None, Some(Preset::FloorOnly)) => SceneSpec::floor_only(),
                (None, _) => SceneSpec::default(),
            };
            let scenes = (0..count)
                .map(|i| generate_scene(&spec, seed.wrapping_add(i as u64)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let paths = scene_io::save_dir(&scenes, &out)?;
            log::info!("wrote {} scenes to {}", paths.len(), out.display());
        }
        Command::Shift {
            profile,
            input,
            out,
            seed,
        } => {
            let prof = match ShiftProfile::preset(&profile) {
                Some(p) => p,
                None if Path::new(&profile).is_file() => read_toml(Some(Path::new(&profile)))?,
                None => return Err(Error::Config(format!("unknown shift profile `{profile}`"))),
            };
            let scenes = scene_io::load_dir(&input)?;
            let shifted = scenes
                .iter()
                .enumerate()
                .map(|(i, s)| apply_shift(s, &prof, seed.wrapping_add(i as u64)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            scene_io::save_dir(&shifted, &out)?;
        }
        Command::Teacher {
            scenes,
            config,
            out,
            dim,
            seed,
        } => {
            let mut cfg: SyntheticTeacherConfig = read_toml(config.as_deref())?;
            if let Some(d) = dim {
                cfg.dim = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let teacher = SyntheticTeacher::new(cfg)?;
            for (i, s) in scene_io::load_dir(&scenes)?.iter().enumerate() {
                teacher.scene_features(s)?.save(&out, &format!("scene_{i:04}"))?;
            }
        }
        Command::Train {
            config,
            scenes,
            teacher,
            out,
            epochs,
            seed,
            max_lr,
            kd_weight,
            log,
        } => {
            let mut file: TrainFile = read_toml(config.as_deref())?;
            if let Some(e) = epochs {
                file.train.epochs = e;
            }
            if let Some(s) = seed {
                file.train.seed = s;
            }
            if let Some(lr) = max_lr {
                file.train.max_lr = lr;
            }
            if let Some(w) = kd_weight {
                file.train.loss_weights[1] = w;
            }
            let data = scene_io::load_dir(&scenes)?;
            if data.is_empty() {
                return Err(Error::Config(format!("no scenes in {}", scenes.display())));
            }
            file.model.num_classes = data[0].num_classes;
            let feats = test_features(&data, &teacher, &file.teacher, Path::new(""))?;
            let mut model = ParamStore::init(file.model, file.init_seed.unwrap_or(file.train.seed))?;
            let train_log = joint_train(&data, &feats, &mut model, &file.train)?;
            save_checkpoint(&snapshot(&model, None), &out)?;
            write(&log.unwrap_or_else(|| out.with_extension("csv")), train_log.to_csv())?;
        }
        Command::Ttt {
            config,
            model,
            scenes,
            teacher,
            variant,
            steps,
            lr,
            rotations,
            stride,
            budget,
            seed,
            online_steps_total,
            report,
            trace,
        } => {
            let mut file: TttFile = read_toml(config.as_deref())?;
            let cfg = &mut file.ttt;
            match variant {
                Some(VariantArg::Offline) => cfg.variant = Variant::Offline,
                Some(VariantArg::Online) => {
                    cfg.variant = Variant::Online;
                    if steps.is_none() && config.is_none() {
                        cfg.steps = 1;
                    }
                }
                None => {}
            }
            if let Some(v) = steps {
                cfg.steps = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = rotations {
                cfg.rotations = v;
            }
            if let Some(v) = stride {
                cfg.stride = parse_stride(&v)?;
            }
            if let Some(v) = budget {
                cfg.budget = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            cfg.online_steps_total |= online_steps_total;
            cfg.validate()?;
            let cfg = file.ttt.clone();
            let store = load_checkpoint(&model)?.store;
            let data = scene_io::load_dir(&scenes)?;
            if data.is_empty() {
                return Err(Error::Config(format!("no scenes in {}", scenes.display())));
            }
            let feats = test_features(&data, &teacher, &file.teacher, Path::new(""))?;
            data.iter().for_each(|s| s.labels.reset_reads());
            let start = std::time::Instant::now();
            let mut preds = Vec::with_capacity(data.len());
            let mut rows = String::from("scene,rotation,step,kd_loss\n");
            let mut updates = 0;
            let mut online = OnlineState::new(&store, cfg.lr);
            for (i, (s, f)) in data.iter().zip(&feats).enumerate() {
                let (logits, tr) = match cfg.variant {
                    Variant::Offline => ttt_offline(&store, s, f, &cfg)?,
                    Variant::Online => ttt_online(&mut online, s, f, &cfg)?,
                };
                updates += tr.updates();
                for r in &tr.steps {
                    rows.push_str(&format!("{i},{},{},{}\n", r.rotation, r.step, r.kd_loss));
                }
                preds.push(logits.argmax_rows());
            }
            let secs = start.elapsed().as_secs_f64();
            let label_reads = data.iter().map(|s| s.labels.reads()).sum();
            let mask: Vec<usize> = (0..data[0].num_classes).collect();
            let (cm, per_scene) = score(&preds, &data, &mask, None)?;
            let method = match cfg.variant {
                Variant::Offline => Method::TttKd,
                Variant::Online => Method::TttKdO,
            };
            let m = miou(&cm, &mask)?;
            println!("{} mIoU {:.2} over {} scenes ({updates} updates)", method.name(), 100.0 * m, data.len());
            if let Some(path) = trace {
                write(&path, rows)?;
            }
            if let Some(path) = report {
                let mut echo = ExperimentConfig {
                    methods: vec![method.name().into()],
                    teacher: file.teacher.clone(),
                    ..Default::default()
                };
                match cfg.variant {
                    Variant::Offline => echo.ttt = cfg.clone(),
                    Variant::Online => echo.online = cfg.clone(),
                }
                let rep = EvalReport {
                    config: echo,
                    seeds: vec![cfg.seed],
                    eval_classes: mask.clone(),
                    results: vec![MethodResult {
                        method,
                        test_set: scenes.display().to_string(),
                        seed: cfg.seed,
                        per_class_iou: cm.per_class_iou(&mask),
                        miou: m,
                        scenes: data.len(),
                        per_scene_miou: per_scene,
                        updates,
                        label_reads,
                        wall_clock_secs: secs,
                    }],
                    sweeps: vec![],
                    wall_clock_secs: secs,
                };
                write(&path, rep.to_json())?;
            }
        }
        Command::Eval {
            config,
            methods,
            out,
            csv,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = methods {
                cfg.methods = m.split(',').map(|s| s.trim().to_string()).collect();
            }
            let rep = run_experiment(&cfg, &config_base(&config))?;
            for r in &rep.results {
                println!(
                    "{:<12} {:<10} seed {:<3} mIoU {:6.2}  updates {}",
                    r.method.name(),
                    r.test_set,
                    r.seed,
                    100.0 * r.miou,
                    r.updates
                );
            }
            write(&out, rep.to_json())?;
            write(&csv.unwrap_or_else(|| out.with_extension("csv")), rep.per_scene_csv())?;
        }
        Command::Sweep {
            config,
            kind,
            values,
            test_set,
            out,
            report,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            let kind = match kind {
                KindArg::Steps => SweepKind::Steps,
                KindArg::Stride => SweepKind::Stride,
                KindArg::Images => SweepKind::Images,
            };
            let test_set = match test_set {
                Some(t) => t,
                None => cfg
                    .test_sets
                    .first()
                    .map(|t| t.name.clone())
                    .ok_or_else(|| Error::Config("config has no test sets".into()))?,
            };
            cfg.methods.clear();
            cfg.sweeps = vec![SweepConfig {
                kind,
                values: parse_values(&values)?,
                test_set,
            }];
            let rep = run_experiment(&cfg, &config_base(&config))?;
            emit_plot_data(&rep, kind, &out)?;
            if let Some(p) = report {
                write(&p, rep.to_json())?;
            }
        }
        Command::GradCheck {
            seeds,
            layer,
            tolerance,
        } => {
            if seeds == 0 {
                return Err(Error::Config("need at least one seed".into()));
            }
            let results = match layer {
                Some(l) => {
                    let l = LAYERS
                        .iter()
                        .find(|&&x| x == l)
                        .ok_or_else(|| Error::Config(format!("unknown layer `{l}`; known: {}", LAYERS.join(", "))))?;
                    layer_suite(0..seeds)?.into_iter().filter(|(n, _)| n == l).collect()
                }
                None => layer_suite(0..seeds)?,
            };
            let mut failed = Vec::new();
            for (name, rep) in &results {
                let ok = rep.max_rel_error < tolerance;
                println!(
                    "{:<22} max rel err {:.3e} ({}[{}])  {}",
                    name,
                    rep.max_rel_error,
                    rep.worst_param,
                    rep.worst_index,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(*name);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Metric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! C interface: opaque scene and model handles, integer status codes, and a
//! thread-local last-error message.
//!
//! Every function returns a [`TttkdStatus`]. On failure the message can be read with
//! [`tttkd_last_error`]. Panics are caught at the boundary and reported as
//! `TTTKD_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tttkd::eval::{accumulate_confusion, miou};
use tttkd::scene::{generate_scene, io as scene_io, Scene, SceneSpec};
use tttkd::segnet::{load_checkpoint, ParamStore};
use tttkd::teacher::{SceneFeatures, SyntheticTeacher, SyntheticTeacherConfig};
use tttkd::ttt::{ensemble_predict, ttt_offline, TttConfig};
use tttkd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TttkdStatus {
    Ok = 0,
    Config = 2,
    Numeric = 3,
    Io = 4,
    NullPointer = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque scene handle.
pub struct TttkdScene {
    scene: Scene,
}

/// Opaque model handle.
pub struct TttkdModel {
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: TttkdStatus, msg: impl Into<String>) -> TttkdStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> TttkdStatus {
    let status = match e.exit_code() {
        3 => TttkdStatus::Numeric,
        4 => TttkdStatus::Io,
        _ => TttkdStatus::Config,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> TttkdStatus) -> TttkdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(TttkdStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, TttkdStatus> {
    if p.is_null() {
        return Err(fail(TttkdStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(TttkdStatus::Config, "path is not UTF-8"))
}

unsafe fn write_labels(labels: &[usize], out: *mut u32, len: usize) -> TttkdStatus {
    if out.is_null() {
        return fail(TttkdStatus::NullPointer, "output buffer is null");
    }
    if len < labels.len() {
        return fail(
            TttkdStatus::BufferTooSmall,
            format!("buffer holds {len} labels, scene has {}", labels.len()),
        );
    }
    let dst = std::slice::from_raw_parts_mut(out, labels.len());
    for (d, &l) in dst.iter_mut().zip(labels) {
        *d = l as u32;
    }
    TttkdStatus::Ok
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length, 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tttkd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Generate a default indoor scene.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn tttkd_scene_generate(seed: u64, out: *mut *mut TttkdScene) -> TttkdStatus {
    guard(|| {
        if out.is_null() {
            return fail(TttkdStatus::NullPointer, "out is null");
        }
        match generate_scene(&SceneSpec::default(), seed) {
            Ok(scene) => {
                *out = Box::into_raw(Box::new(TttkdScene { scene }));
                TttkdStatus::Ok
            }
            Err(e) => from_error(e.into()),
        }
    })
}

/// Load a `.ttts` scene file.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn tttkd_scene_load(path: *const c_char, out: *mut *mut TttkdScene) -> TttkdStatus {
    guard(|| {
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(TttkdStatus::NullPointer, "out is null");
        }
        match scene_io::load_scene(&path) {
            Ok(scene) => {
                *out = Box::into_raw(Box::new(TttkdScene { scene }));
                TttkdStatus::Ok
            }
            Err(e) => from_error(e.into()),
        }
    })
}

/// Write a scene to a `.ttts` file.
///
/// # Safety
/// `scene` must be a live handle, `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tttkd_scene_save(scene: *const TttkdScene, path: *const c_char) -> TttkdStatus {
    guard(|| {
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let Some(s) = scene.as_ref() else {
            return fail(TttkdStatus::NullPointer, "scene is null");
        };
        match scene_io::save_scene(&s.scene, &path) {
            Ok(()) => TttkdStatus::Ok,
            Err(e) => from_error(e.into()),
        }
    })
}

/// Point count of a scene, 0 for a null handle.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tttkd_scene_num_points(scene: *const TttkdScene) -> usize {
    scene.as_ref().map_or(0, |s| s.scene.len())
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tttkd_scene_free(scene: *mut TttkdScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string, `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn tttkd_model_load(path: *const c_char, out: *mut *mut TttkdModel) -> TttkdStatus {
    guard(|| {
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(TttkdStatus::NullPointer, "out is null");
        }
        match load_checkpoint(&path) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(TttkdModel { store: c.store }));
                TttkdStatus::Ok
            }
            Err(e) => from_error(e.into()),
        }
    })
}

/// Number of output classes, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tttkd_model_num_classes(model: *const TttkdModel) -> usize {
    model.as_ref().map_or(0, |m| m.store.config.num_classes)
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tttkd_model_free(model: *mut TttkdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Rotation-ensembled prediction without adaptation. Writes one class id per
/// point into `out` (capacity `len`).
///
/// # Safety
/// Handles must be live; `out` must point to `len` writable `u32`s.
#[no_mangle]
pub unsafe extern "C" fn tttkd_predict(
    model: *const TttkdModel,
    scene: *const TttkdScene,
    rotations: usize,
    out: *mut u32,
    len: usize,
) -> TttkdStatus {
    guard(|| {
        let (Some(m), Some(s)) = (model.as_ref(), scene.as_ref()) else {
            return fail(TttkdStatus::NullPointer, "model or scene is null");
        };
        match ensemble_predict(&m.store, &s.scene, rotations) {
            Ok(logits) => write_labels(&logits.argmax_rows(), out, len),
            Err(e) => from_error(e),
        }
    })
}

/// Offline test-time training on one scene, then prediction. `teacher_dir`
/// holds `scene_0000_imgNN.tttf` caches for this scene; null uses the synthetic
/// teacher with default settings. The model handle is left unchanged.
///
/// # Safety
/// Handles must be live; `teacher_dir` null or NUL-terminated; `out` must point
/// to `len` writable `u32`s.
#[no_mangle]
pub unsafe extern "C" fn tttkd_ttt_offline(
    model: *const TttkdModel,
    scene: *const TttkdScene,
    teacher_dir: *const c_char,
    steps: usize,
    lr: f32,
    rotations: usize,
    seed: u64,
    out: *mut u32,
    len: usize,
) -> TttkdStatus {
    guard(|| {
        let (Some(m), Some(s)) = (model.as_ref(), scene.as_ref()) else {
            return fail(TttkdStatus::NullPointer, "model or scene is null");
        };
        let feats = if teacher_dir.is_null() {
            let cfg = SyntheticTeacherConfig {
                num_classes: s.scene.num_classes,
                dim: m.store.config.kd_dim,
                ..Default::default()
            };
            SyntheticTeacher::new(cfg).and_then(|t| t.scene_features(&s.scene))
        } else {
            let dir = match path_arg(teacher_dir) {
                Ok(p) => p,
                Err(st) => return st,
            };
            SceneFeatures::load(&dir, "scene_0000", s.scene.images.len())
        };
        let feats = match feats {
            Ok(f) => f,
            Err(e) => return from_error(e.into()),
        };
        let cfg = TttConfig {
            steps,
            lr,
            rotations,
            seed,
            ..Default::default()
        };
        match ttt_offline(&m.store, &s.scene, &feats, &cfg) {
            Ok((logits, _)) => write_labels(&logits.argmax_rows(), out, len),
            Err(e) => from_error(e),
        }
    })
}

/// mIoU over all `classes` of `n` predicted and ground-truth ids.
///
/// # Safety
/// `pred` and `gt` must point to `n` readable `u32`s, `out` to one `f64`.
#[no_mangle]
pub unsafe extern "C" fn tttkd_miou(
    pred: *const u32,
    gt: *const u32,
    n: usize,
    classes: usize,
    out: *mut f64,
) -> TttkdStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return fail(TttkdStatus::NullPointer, "null argument");
        }
        let p: Vec<usize> = std::slice::from_raw_parts(pred, n).iter().map(|&v| v as usize).collect();
        let g: Vec<usize> = std::slice::from_raw_parts(gt, n).iter().map(|&v| v as usize).collect();
        let mask: Vec<usize> = (0..classes).collect();
        match accumulate_confusion(&p, &g, &mask, classes).and_then(|cm| miou(&cm, &mask)) {
            Ok(v) => {
                *out = v;
                TttkdStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

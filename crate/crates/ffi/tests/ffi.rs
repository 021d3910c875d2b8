use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use tttkd::scene::{generate_scene, SceneSpec};
use tttkd::segnet::{save_checkpoint, snapshot, ModelConfig, ParamStore};
use tttkd_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { tttkd_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn small_model(dir: &Path) -> CString {
    let cfg = ModelConfig {
        widths: vec![16, 16],
        hidden: 16,
        kd_dim: 64,
        ..Default::default()
    };
    let store = ParamStore::init(cfg, 3).unwrap();
    let p = dir.join("m.ckpt");
    save_checkpoint(&snapshot(&store, None), &p).unwrap();
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn scene_round_trip_and_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let mut scene = ptr::null_mut();
    assert_eq!(unsafe { tttkd_scene_generate(7, &mut scene) }, TttkdStatus::Ok);
    let n = unsafe { tttkd_scene_num_points(scene) };
    assert_eq!(n, generate_scene(&SceneSpec::default(), 7).unwrap().len());

    let path = CString::new(dir.path().join("s.ttts").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tttkd_scene_save(scene, path.as_ptr()) }, TttkdStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { tttkd_scene_load(path.as_ptr(), &mut back) }, TttkdStatus::Ok);
    assert_eq!(unsafe { tttkd_scene_num_points(back) }, n);

    let mpath = small_model(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { tttkd_model_load(mpath.as_ptr(), &mut model) }, TttkdStatus::Ok);
    assert_eq!(unsafe { tttkd_model_num_classes(model) }, 8);

    let mut a = vec![0u32; n];
    let mut b = vec![0u32; n];
    assert_eq!(unsafe { tttkd_predict(model, scene, 2, a.as_mut_ptr(), n) }, TttkdStatus::Ok);
    assert_eq!(unsafe { tttkd_predict(model, back, 2, b.as_mut_ptr(), n) }, TttkdStatus::Ok);
    assert_eq!(a, b);
    assert!(a.iter().all(|&c| c < 8));

    let st = unsafe { tttkd_predict(model, scene, 2, a.as_mut_ptr(), n - 1) };
    assert_eq!(st, TttkdStatus::BufferTooSmall);
    assert!(last_error().contains("buffer"));

    let mut t = vec![0u32; n];
    let st = unsafe { tttkd_ttt_offline(model, scene, ptr::null(), 2, 0.1, 2, 0, t.as_mut_ptr(), n) };
    assert_eq!(st, TttkdStatus::Ok, "{}", last_error());
    assert!(t.iter().all(|&c| c < 8));

    unsafe {
        tttkd_scene_free(scene);
        tttkd_scene_free(back);
        tttkd_model_free(model);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut scene = ptr::null_mut();
    let missing = CString::new("/nonexistent/dir/x.ttts").unwrap();
    assert_eq!(unsafe { tttkd_scene_load(missing.as_ptr(), &mut scene) }, TttkdStatus::Io);
    assert!(last_error().contains("/nonexistent/dir/x.ttts"));
    assert!(scene.is_null());

    assert_eq!(unsafe { tttkd_scene_load(ptr::null(), &mut scene) }, TttkdStatus::NullPointer);
    assert_eq!(unsafe { tttkd_predict(ptr::null(), ptr::null(), 1, ptr::null_mut(), 0) }, TttkdStatus::NullPointer);

    let mut m = 0.0;
    let pred = [0u32, 5];
    let gt = [0u32, 1];
    assert_eq!(unsafe { tttkd_miou(pred.as_ptr(), gt.as_ptr(), 2, 2, &mut m) }, TttkdStatus::Config);
    assert!(last_error().contains('5'));

    // a successful call clears the message
    let pred = [0u32, 1, 1];
    let gt = [0u32, 1, 0];
    assert_eq!(unsafe { tttkd_miou(pred.as_ptr(), gt.as_ptr(), 3, 2, &mut m) }, TttkdStatus::Ok);
    assert_eq!(unsafe { tttkd_last_error(ptr::null_mut(), 0) }, 0);
    assert!((m - 0.5).abs() < 1e-12);
}

#[test]
fn last_error_truncates() {
    let missing = CString::new("/nonexistent/a/very/long/path/name.ttts").unwrap();
    let mut scene = ptr::null_mut();
    unsafe { tttkd_scene_load(missing.as_ptr(), &mut scene) };
    let mut buf = [1 as c_char; 8];
    let full = unsafe { tttkd_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(full > 8);
    assert_eq!(buf[7], 0);
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tttkd.h");
    let text = std::fs::read_to_string(&header).unwrap();
    assert!(text.contains("tttkd_ttt_offline"));
    assert!(text.contains("typedef struct TttkdScene TttkdScene"));
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&header)
            .output()
        else {
            eprintln!("{compiler} not available; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

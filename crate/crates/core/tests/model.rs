use std::collections::BTreeMap;

use tttkd::scene::{generate_scene, SceneSpec};
use tttkd::segnet::{Batch, ModelConfig, ParamStore};
use tttkd::tensor::gradcheck::grad_check;
use tttkd::tensor::{Gradients, Tensor};

fn model() -> ParamStore {
    let cfg = ModelConfig {
        widths: vec![16, 24],
        hidden: 16,
        ..Default::default()
    };
    ParamStore::init(cfg, 11).unwrap()
}

#[test]
fn predictions_follow_point_permutation() {
    let m = model();
    let scene = generate_scene(&SceneSpec::default(), 12).unwrap();
    let n = scene.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7919 + 13) % n).collect();
    assert_eq!(
        perm.iter().collect::<std::collections::BTreeSet<_>>().len(),
        n,
        "stride must be coprime with n"
    );
    let shuffled = scene.select(&perm);
    let a = m.predict(&Batch::from_scene(&scene, m.config.k).unwrap()).unwrap();
    let b = m.predict(&Batch::from_scene(&shuffled, m.config.k).unwrap()).unwrap();
    for (new, &old) in perm.iter().enumerate() {
        let (x, y) = (a.row(old), b.row(new));
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()), "row {old}");
    }
}

#[test]
fn duplicate_points_get_identical_rows() {
    let m = model();
    let scene = generate_scene(&SceneSpec::default(), 13).unwrap();
    let mut keep: Vec<usize> = (0..scene.len()).collect();
    keep.push(5);
    let dup = scene.select(&keep);
    let l = m.predict(&Batch::from_scene(&dup, m.config.k).unwrap()).unwrap();
    assert_eq!(l.row(5), l.row(dup.len() - 1));
}

#[test]
fn grad_check_catches_a_one_percent_corruption() {
    // The relative error of a gradient scaled by (1 + δ) is δ / (2 + δ).
    let mut params = BTreeMap::new();
    params.insert("p".to_string(), Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
    let exact = |scale: f32| {
        let mut g = Gradients::default();
        let d: Vec<f32> = params["p"].data().iter().map(|&v| scale * 2.0 * v).collect();
        g.insert("p".into(), Tensor::new(vec![3], d).unwrap());
        g
    };
    let f = |p: &BTreeMap<String, Vec<f64>>| p["p"].iter().map(|v| v * v).sum::<f64>();
    let clean = grad_check(f, &params, &exact(1.0), 1e-3).unwrap();
    assert!(clean.max_rel_error < 1e-6, "{clean:?}");
    let one = grad_check(f, &params, &exact(1.01), 1e-3).unwrap();
    assert!((one.max_rel_error - 0.01 / 2.01).abs() < 1e-6, "{one:?}");
    assert!(one.max_rel_error > 4.9e-3);
    let two = grad_check(f, &params, &exact(1.02), 1e-3).unwrap();
    assert!(two.max_rel_error > 5e-3, "{two:?}");
}

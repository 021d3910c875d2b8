//! Gradient checks of every differentiable op against the `f64` reference kernels,
//! on small random problems.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::gradcheck::{grad_check, GradCheckReport, ParamMap};
use super::knn::{knn_indices, TieBreak};
use super::reference::{self as r, Mat};
use super::{BnMode, Graph, Result, RunningStats, Tensor, TensorError};
use crate::rng::{mix, rng, tag, Rng};

pub const LAYERS: [&str; 10] = [
    "linear",
    "relu",
    "bn-train",
    "bn-eval",
    "bn-frozen-stats-train",
    "bn-batch-stats",
    "knn-max",
    "smoothed-ce",
    "cosine-kd",
    "entropy",
];

pub const EPS: f64 = 1e-3;

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Values spaced at least `gap` apart in random order, so a finite-difference
/// probe never crosses a kink.
fn spaced(rng: &mut Rng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn mat(p: &ParamMap, name: &str, rows: usize, cols: usize) -> Mat {
    Mat {
        rows,
        cols,
        data: p[name].clone(),
    }
}

/// Analytic-versus-numeric report for one op on one seed.
pub fn check_layer(layer: &str, seed: u64) -> Result<GradCheckReport> {
    let mut g_rng = rng(mix(seed, tag(layer)));
    let rng = &mut g_rng;
    let (n, d, o) = (6, 4, 3);
    let mut params = BTreeMap::new();
    let mut g = Graph::new();
    let objective: Box<dyn Fn(&ParamMap) -> f64>;
    let loss;
    match layer {
        "linear" => {
            params.insert("x".to_string(), normal(rng, &[n, d]));
            params.insert("w".to_string(), normal(rng, &[d, o]));
            params.insert("b".to_string(), normal(rng, &[o]));
            let wt = normal(rng, &[n, o]);
            let ids: Vec<_> = ["x", "w", "b"].iter().map(|k| g.leaf(*k, params[*k].clone().with_grad())).collect();
            let y = g.linear(ids[0], ids[1], ids[2])?;
            loss = g.weighted_sum(y, &wt)?;
            objective = Box::new(move |p| {
                r::weighted_sum(&r::linear(&mat(p, "x", n, d), &mat(p, "w", d, o), &p["b"]), &wt)
            });
        }
        "relu" => {
            params.insert("x".to_string(), spaced(rng, &[n, d], 0.05));
            let wt = normal(rng, &[n, d]);
            let x = g.leaf("x", params["x"].clone().with_grad());
            let y = g.relu(x)?;
            loss = g.weighted_sum(y, &wt)?;
            objective = Box::new(move |p| r::weighted_sum(&r::relu(&mat(p, "x", n, d)), &wt));
        }
        "bn-train" | "bn-eval" | "bn-frozen-stats-train" | "bn-batch-stats" => {
            let mode = match layer {
                "bn-train" => BnMode::Train,
                "bn-eval" => BnMode::Eval,
                "bn-frozen-stats-train" => BnMode::FrozenStatsTrain,
                _ => BnMode::BatchStats,
            };
            params.insert("x".to_string(), normal(rng, &[n, d]));
            params.insert("gamma".to_string(), normal(rng, &[d]));
            params.insert("beta".to_string(), normal(rng, &[d]));
            let running = RunningStats {
                mean: normal(rng, &[d]).into_data(),
                var: (0..d).map(|_| rng.gen_range(0.5..2.0)).collect(),
            };
            let wt = normal(rng, &[n, d]);
            let ids: Vec<_> = ["x", "gamma", "beta"].iter().map(|k| g.leaf(*k, params[*k].clone().with_grad())).collect();
            let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], &running, mode)?;
            loss = g.weighted_sum(y, &wt)?;
            let mean: Vec<f64> = running.mean.iter().map(|&v| v as f64).collect();
            let var: Vec<f64> = running.var.iter().map(|&v| v as f64).collect();
            let batch = mode.uses_batch_stats();
            objective = Box::new(move |p| {
                let stats = (!batch).then_some((mean.as_slice(), var.as_slice()));
                r::weighted_sum(&r::batch_norm(&mat(p, "x", n, d), &p["gamma"], &p["beta"], stats), &wt)
            });
        }
        "knn-max" => {
            let coords: Vec<[f32; 3]> = (0..n)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let nb = knn_indices(&coords, 3, TieBreak::Index)?;
            params.insert("x".to_string(), spaced(rng, &[n, d], 0.05));
            let wt = normal(rng, &[n, d]);
            let x = g.leaf("x", params["x"].clone().with_grad());
            let y = g.knn_max(x, &nb)?;
            loss = g.weighted_sum(y, &wt)?;
            objective = Box::new(move |p| r::weighted_sum(&r::knn_max(&mat(p, "x", n, d), &nb), &wt));
        }
        "smoothed-ce" => {
            params.insert("logits".to_string(), normal(rng, &[n, o]));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..o)).collect();
            let x = g.leaf("logits", params["logits"].clone().with_grad());
            loss = g.smoothed_cross_entropy(x, &labels, 0.2)?;
            objective = Box::new(move |p| r::smoothed_cross_entropy(&mat(p, "logits", n, o), &labels, 0.2));
        }
        "cosine-kd" => {
            params.insert("pred".to_string(), normal(rng, &[n, d]));
            let target = normal(rng, &[n, d]);
            let x = g.leaf("pred", params["pred"].clone().with_grad());
            loss = g.cosine_distill(x, &target)?;
            let t = Mat::from_tensor(&target);
            objective = Box::new(move |p| r::cosine_distill(&mat(p, "pred", n, d), &t));
        }
        "entropy" => {
            params.insert("logits".to_string(), normal(rng, &[n, o]));
            let x = g.leaf("logits", params["logits"].clone().with_grad());
            loss = g.softmax_entropy(x)?;
            objective = Box::new(move |p| r::softmax_entropy(&mat(p, "logits", n, o)));
        }
        other => return Err(TensorError::Config(format!("no gradient check for layer `{other}`"))),
    }
    let grads = g.backward(loss)?;
    grad_check(objective, &params, &grads, EPS)
}

/// Worst report per layer over `seeds`.
pub fn layer_suite(seeds: std::ops::Range<u64>) -> Result<Vec<(&'static str, GradCheckReport)>> {
    LAYERS
        .iter()
        .map(|&layer| {
            let mut worst: Option<GradCheckReport> = None;
            for s in seeds.clone() {
                let rep = check_layer(layer, s)?;
                if worst.as_ref().map_or(true, |w| rep.max_rel_error > w.max_rel_error) {
                    worst = Some(rep);
                }
            }
            let worst = worst.ok_or_else(|| TensorError::Config("empty seed range".into()))?;
            Ok((layer, worst))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_within_tolerance() {
        for (layer, rep) in layer_suite(0..3).unwrap() {
            assert!(rep.max_rel_error < 1e-3, "{layer}: {rep:?}");
        }
    }

    #[test]
    fn unknown_layer_is_an_error() {
        assert!(check_layer("conv", 0).is_err());
    }
}

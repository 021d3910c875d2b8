//! Central-difference gradient oracle.
//!
//! The objective is evaluated in `f64` on parameters widened from `f32`, and the
//! analytic gradient comes from the tape. The reported error per coordinate is
//! `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.

use std::collections::BTreeMap;

use super::{Gradients, Result, Tensor, TensorError};

pub type ParamMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Widen named `f32` tensors into the oracle's parameter map.
pub fn widen(params: &BTreeMap<String, Tensor>) -> ParamMap {
    params
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Compare `analytic` against central differences of `f` around `params`.
///
/// Every coordinate of every parameter present in `analytic` is perturbed. A
/// parameter absent from `analytic` is treated as having a zero gradient.
pub fn grad_check<F>(
    mut f: F,
    params: &BTreeMap<String, Tensor>,
    analytic: &Gradients,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamMap) -> f64,
{
    if !(eps > 0.0) {
        return Err(TensorError::Config(format!("eps {eps} must be > 0")));
    }
    let mut p = widen(params);
    let first = f(&p);
    let second = f(&p);
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let names: Vec<String> = p.keys().cloned().collect();
    for name in names {
        let len = p[&name].len();
        let grad = analytic.get(&name);
        if let Some(g) = grad {
            if g.numel() != len {
                return Err(TensorError::Shape {
                    op: "grad_check",
                    lhs: g.shape().to_vec(),
                    rhs: vec![len],
                });
            }
        }
        for i in 0..len {
            let orig = p[&name][i];
            p.get_mut(&name).unwrap()[i] = orig + eps;
            let plus = f(&p);
            p.get_mut(&name).unwrap()[i] = orig - eps;
            let minus = f(&p);
            p.get_mut(&name).unwrap()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g.data()[i] as f64);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: &[f32]) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        m
    }

    #[test]
    fn quadratic_is_exact() {
        let params = one("p", &[0.7]);
        let mut g = Gradients::default();
        // f = 3p² + p → f' = 6p + 1
        g.insert("p".into(), Tensor::new(vec![1], vec![(6.0 * 0.7f32 as f64 + 1.0) as f32]).unwrap());
        let r = grad_check(|p| 3.0 * p["p"][0].powi(2) + p["p"][0], &params, &g, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn rejects_nondeterministic_objective() {
        let params = one("p", &[1.0]);
        let mut calls = 0.0;
        let r = grad_check(
            |_| {
                calls += 1.0;
                calls
            },
            &params,
            &Gradients::default(),
            1e-3,
        );
        assert!(matches!(r, Err(TensorError::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_bad_eps() {
        let params = one("p", &[1.0]);
        assert!(grad_check(|_| 0.0, &params, &Gradients::default(), 0.0).is_err());
    }
}

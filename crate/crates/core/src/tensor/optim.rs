//! Momentum-free SGD, AdamW with decoupled weight decay, and the one-cycle schedule.

use std::collections::BTreeMap;

use super::{Gradients, Result, Tensor, TensorError};

/// Named, possibly frozen, parameters an optimizer can update.
pub trait ParamSet {
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
    fn is_frozen(&self, name: &str) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moments for one parameter plus how many updates it has seen.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub hyper: AdamHyper,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn sgd(lr: f32) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            step: 0,
            hyper: AdamHyper {
                lr,
                beta1: 0.0,
                beta2: 0.0,
                eps: 0.0,
                weight_decay: 0.0,
            },
            moments: BTreeMap::new(),
        }
    }

    pub fn adamw(hyper: AdamHyper) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            step: 0,
            hyper,
            moments: BTreeMap::new(),
        }
    }

    /// Applies whichever update rule this state was built for.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &Gradients) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                sgd_step(params, grads, self.hyper.lr)?;
                self.step += 1;
                Ok(())
            }
            OptimizerKind::AdamW => {
                let hyper = self.hyper;
                adamw_step(params, grads, self, &hyper)
            }
        }
    }
}

fn check_grad<'a, P: ParamSet + ?Sized>(
    params: &'a mut P,
    name: &str,
    g: &Tensor,
) -> Result<&'a mut Tensor> {
    if params.is_frozen(name) {
        return Err(TensorError::FrozenGradient(name.to_string()));
    }
    let p = params
        .param_mut(name)
        .ok_or_else(|| TensorError::Config(format!("gradient for unknown parameter `{name}`")))?;
    if p.shape() != g.shape() {
        return Err(TensorError::Shape {
            op: "optimizer",
            lhs: p.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    Ok(p)
}

/// `p ← p − lr·g` for every parameter that has a gradient.
pub fn sgd_step<P: ParamSet + ?Sized>(params: &mut P, grads: &Gradients, lr: f32) -> Result<()> {
    if lr.is_nan() || lr < 0.0 {
        return Err(TensorError::Config(format!("sgd learning rate {lr} must be >= 0")));
    }
    for (name, g) in grads.iter() {
        check_grad(params, name, g)?;
    }
    for (name, g) in grads.iter() {
        let p = params.param_mut(name).expect("checked above");
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Decoupled weight decay followed by a bias-corrected Adam update. Parameters
/// without a gradient are skipped entirely.
pub fn adamw_step<P: ParamSet + ?Sized>(
    params: &mut P,
    grads: &Gradients,
    state: &mut OptimizerState,
    hyper: &AdamHyper,
) -> Result<()> {
    if !(hyper.lr > 0.0) {
        return Err(TensorError::Config(format!(
            "adamw learning rate {} must be > 0",
            hyper.lr
        )));
    }
    for (name, g) in grads.iter() {
        check_grad(params, name, g)?;
    }
    state.step += 1;
    for (name, g) in grads.iter() {
        let p = params.param_mut(name).expect("checked above");
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
            steps: 0,
        });
        mom.steps += 1;
        let bc1 = 1.0 - hyper.beta1.powi(mom.steps as i32);
        let bc2 = 1.0 - hyper.beta2.powi(mom.steps as i32);
        let decay = 1.0 - hyper.lr * hyper.weight_decay;
        let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
        for (i, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w *= decay;
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * d;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * d * d;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Cosine one-cycle learning-rate schedule: warm up from `max_lr/div_initial` to
/// `max_lr`, then anneal to `max_lr/(div_initial·div_final)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub max_lr: f32,
    pub div_initial: f32,
    pub div_final: f32,
    pub pct_start: f32,
    pub total_steps: usize,
}

impl OneCycle {
    pub fn lr_at(&self, step: usize) -> f32 {
        let initial = self.max_lr / self.div_initial;
        let min = initial / self.div_final;
        let total = self.total_steps.max(1) as f32;
        let warm = (self.pct_start * total - 1.0).max(0.0);
        let s = step as f32;
        let cos_anneal = |from: f32, to: f32, frac: f32| {
            let frac = frac.clamp(0.0, 1.0);
            to + (from - to) * 0.5 * (1.0 + (std::f32::consts::PI * frac).cos())
        };
        if s <= warm && warm > 0.0 {
            cos_anneal(initial, self.max_lr, s / warm)
        } else {
            let rest = (total - 1.0 - warm).max(1.0);
            cos_anneal(self.max_lr, min, (s - warm) / rest)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flat {
        p: Tensor,
        frozen: bool,
    }

    impl ParamSet for Flat {
        fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
            (name == "p").then_some(&mut self.p)
        }
        fn is_frozen(&self, _: &str) -> bool {
            self.frozen
        }
    }

    fn grads(v: &[f32]) -> Gradients {
        let mut g = Gradients::default();
        g.insert("p".into(), Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        g
    }

    fn flat(v: &[f32]) -> Flat {
        Flat {
            p: Tensor::new(vec![v.len()], v.to_vec()).unwrap(),
            frozen: false,
        }
    }

    #[test]
    fn sgd_hand_cases() {
        let mut p = flat(&[1.0]);
        sgd_step(&mut p, &grads(&[0.5]), 1.0).unwrap();
        assert_eq!(p.p.data(), &[0.5]);
        sgd_step(&mut p, &grads(&[0.0]), 1.0).unwrap();
        assert_eq!(p.p.data(), &[0.5]);
        // relinearised g = p
        let mut p = flat(&[1.0]);
        for expect in [0.9f32, 0.81] {
            let g = grads(p.p.data());
            sgd_step(&mut p, &g, 0.1).unwrap();
            assert!((p.p.data()[0] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn sgd_rejects_frozen_grad() {
        let mut p = flat(&[1.0]);
        p.frozen = true;
        assert!(matches!(
            sgd_step(&mut p, &grads(&[1.0]), 1.0),
            Err(TensorError::FrozenGradient(_))
        ));
    }

    #[test]
    fn adamw_hand_cases() {
        let hyper = AdamHyper {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = flat(&[0.3, -0.7]);
        let mut st = OptimizerState::adamw(hyper);
        adamw_step(&mut p, &grads(&[0.0, 0.0]), &mut st, &hyper).unwrap();
        assert_eq!(p.p.data(), &[0.3, -0.7]);

        // first step: mhat = g, vhat = g², update = lr·g/(|g|+eps) ≈ lr·sign(g)
        let mut p = flat(&[0.0, 0.0]);
        let mut st = OptimizerState::adamw(hyper);
        adamw_step(&mut p, &grads(&[2.0, -0.5]), &mut st, &hyper).unwrap();
        let e0 = -(0.01f64 * 2.0 / (2.0 + 1e-8)) as f32;
        let e1 = (0.01f64 * 0.5 / (0.5 + 1e-8)) as f32;
        assert!((p.p.data()[0] - e0).abs() < 1e-7);
        assert!((p.p.data()[1] - e1).abs() < 1e-7);

        let hyper = AdamHyper {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = flat(&[2.0]);
        let mut st = OptimizerState::adamw(hyper);
        adamw_step(&mut p, &grads(&[0.0]), &mut st, &hyper).unwrap();
        assert!((p.p.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-7);
    }

    #[test]
    fn adamw_rejects_nonpositive_lr() {
        let hyper = AdamHyper {
            lr: 0.0,
            ..Default::default()
        };
        let mut p = flat(&[1.0]);
        let mut st = OptimizerState::adamw(hyper);
        assert!(matches!(
            adamw_step(&mut p, &grads(&[1.0]), &mut st, &hyper),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn one_cycle_endpoints() {
        let s = OneCycle {
            max_lr: 0.005,
            div_initial: 10.0,
            div_final: 1000.0,
            pct_start: 0.3,
            total_steps: 100,
        };
        assert!((s.lr_at(0) - 0.0005).abs() < 1e-9);
        let peak = (0..100).map(|i| s.lr_at(i)).fold(0.0f32, f32::max);
        assert!((peak - 0.005).abs() < 1e-7);
        assert!((s.lr_at(99) - 0.0005 / 1000.0).abs() < 1e-9);
    }
}

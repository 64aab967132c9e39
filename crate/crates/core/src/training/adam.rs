//! Adam with bias correction and per-tensor moment state keyed by name.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NamedTensorMut;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected update of `theta` in place; `step` counts from 1.
pub fn adam_update<T: Scalar>(theta: &mut [T], grad: &[T], state: &mut Moments, step: u64, cfg: &AdamConfig) {
    debug_assert!(step >= 1);
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        let g = g.as_f64();
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = T::lit(p.as_f64() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn state(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// Updates every learnable tensor accepted by `trainable`. Gradients are
    /// checked for finiteness before anything moves.
    pub fn step<T: Scalar>(&mut self, params: Vec<NamedTensorMut<'_, T>>, trainable: impl Fn(&str) -> bool) -> Result<()> {
        let active: Vec<_> = params
            .into_iter()
            .filter(|p| p.learnable && p.tensor.has_grad() && trainable(&p.name))
            .collect();
        for p in &active {
            if !p.tensor.grad().expect("has grad").iter().all(|g| g.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        for p in active {
            let n = p.tensor.len();
            let state = self.state.entry(p.name).or_insert_with(|| Moments::zeros(n));
            let (theta, grad) = p.tensor.value_and_grad_mut();
            adam_update(theta, grad.expect("has grad"), state, self.step, &self.cfg);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor4;
    use proptest::prelude::*;

    fn param(v: f64, g: f64) -> Tensor4<f64> {
        let mut t = Tensor4::param([1, 1, 1, 1], vec![v]);
        t.grad_mut().unwrap()[0] = g;
        t
    }

    fn named(t: &mut Tensor4<f64>) -> Vec<NamedTensorMut<'_, f64>> {
        vec![NamedTensorMut {
            name: "w".into(),
            tensor: t,
            learnable: true,
        }]
    }

    proptest! {
        #[test]
        fn first_step_is_lr_sign(g in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
            let mut t = param(0.5, g);
            let mut opt = Adam::new(AdamConfig::default());
            opt.step(named(&mut t), |_| true).unwrap();
            let moved = t.data()[0] - 0.5;
            let expect = -1e-3 * g.signum();
            prop_assert!(((moved - expect) / expect).abs() < 1e-8 + 2e-8 / g.abs());
        }

        #[test]
        fn small_lr_bounds_displacement(lr in 1e-9f64..1e-6, steps in 1usize..30, g in -5.0f64..5.0) {
            let cfg = AdamConfig { lr, ..Default::default() };
            let mut theta = [0.25f64];
            let mut st = Moments::zeros(1);
            for s in 1..=steps {
                adam_update(&mut theta, &[g], &mut st, s as u64, &cfg);
            }
            prop_assert!((theta[0] - 0.25).abs() <= lr * steps as f64 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn zero_gradient_never_moves() {
        let mut t = param(0.3, 0.0);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..50 {
            opt.step(named(&mut t), |_| true).unwrap();
        }
        assert_eq!(t.data()[0], 0.3);
    }

    #[test]
    fn matches_scripted_scalar_trace() {
        // theta^2 / 2 from theta = 1, written out without the library path
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for k in 1..=10 {
            let g = th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, k));
            let vh = v / (1.0 - f64::powi(b2, k));
            th -= lr * mh / (vh.sqrt() + eps);
            trace.push(th);
        }
        let mut t = param(1.0, 0.0);
        let mut opt = Adam::new(AdamConfig::default());
        for expect in trace {
            let g = t.data()[0];
            t.grad_mut().unwrap()[0] = g;
            opt.step(named(&mut t), |_| true).unwrap();
            assert!((t.data()[0] - expect).abs() < 1e-10);
        }
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn non_finite_gradient_is_rejected_before_update() {
        let mut a = param(1.0, 1.0);
        let mut b = param(2.0, f64::NAN);
        let mut opt = Adam::new(AdamConfig::default());
        let params = vec![
            NamedTensorMut { name: "a".into(), tensor: &mut a, learnable: true },
            NamedTensorMut { name: "b".into(), tensor: &mut b, learnable: true },
        ];
        assert!(matches!(opt.step(params, |_| true), Err(Error::NonFinite(_))));
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn filter_and_buffers_are_skipped() {
        let mut a = param(1.0, 1.0);
        let mut b = param(2.0, 1.0);
        let mut buf = param(3.0, 1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let params = vec![
            NamedTensorMut { name: "keep.w".into(), tensor: &mut a, learnable: true },
            NamedTensorMut { name: "frozen.w".into(), tensor: &mut b, learnable: true },
            NamedTensorMut { name: "keep.running_mean".into(), tensor: &mut buf, learnable: false },
        ];
        opt.step(params, |n| n.starts_with("keep.")).unwrap();
        assert_ne!(a.data()[0], 1.0);
        assert_eq!(b.data()[0], 2.0);
        assert_eq!(buf.data()[0], 3.0);
        assert!(opt.state("frozen.w").is_none());
    }
}

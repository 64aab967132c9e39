//! Central finite-difference verification of analytic gradients.
//!
//! Relative error for a tensor is
//! `max_i |a_i − n_i| / max(1e-8, max_i |a_i| + max_i |n_i|)`, where `a` is
//! the analytic and `n` the numeric gradient over the checked elements.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, Module, NamedTensorMut, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Tensors with more elements than this are subsampled.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn exhaustive(h: f64, tol: f64) -> Self {
        Self {
            h,
            tol,
            max_per_tensor: 10_000,
            seed: 0,
        }
    }

    pub fn sampled(h: f64, tol: f64, max_per_tensor: usize, seed: u64) -> Self {
        Self {
            h,
            tol,
            max_per_tensor,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub h: f64,
    /// Seed of the element subsample; recorded even when nothing was subsampled.
    pub seed: u64,
    pub passed: bool,
}

impl GradCheckReport {
    fn from_entries(entries: Vec<GradCheckEntry>, opts: &GradCheckOptions) -> Self {
        let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
        Self {
            passed: max_rel_err < opts.tol,
            entries,
            max_rel_err,
            tol: opts.tol,
            h: opts.h,
            seed: opts.seed,
        }
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "grad check: {} (max rel err {:.3e}, tol {:.0e}, h {:.0e}, seed {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.h,
            self.seed
        )?;
        for e in &self.entries {
            writeln!(f, "  {:<48} {:>6}/{:<8} {:.3e}", e.name, e.checked, e.total, e.max_rel_err)?;
        }
        Ok(())
    }
}

/// A deterministic scalar function of an input tensor and a set of
/// parameters, with an analytic gradient.
pub trait Objective<T: Scalar> {
    fn value(&mut self, x: &Tensor4<T>) -> Result<T>;
    /// Clears parameter gradients, runs forward and backward, and returns the
    /// gradient with respect to `x`. Parameter gradients are left in place.
    fn gradient(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>>;
    fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>>;
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let amax = analytic.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let nmax = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / (amax + nmax).max(1e-8)
}

fn pick(total: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    if total <= opts.max_per_tensor {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut v = sample(&mut rng, total, opts.max_per_tensor).into_vec();
        v.sort_unstable();
        v
    }
}

fn finite<T: Scalar>(v: T, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v.as_f64())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Checks `analytic` against central differences of `f` at `x`.
pub fn check_input_gradient<T: Scalar>(
    name: &str,
    mut f: impl FnMut(&Tensor4<T>) -> Result<T>,
    x: &Tensor4<T>,
    analytic: &Tensor4<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckEntry> {
    x.same_dims(analytic, "analytic gradient")?;
    let h = T::lit(opts.h);
    let idx = pick(x.len(), opts, u64::MAX);
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(idx.len());
    let mut an = Vec::with_capacity(idx.len());
    for &i in &idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = finite(f(&probe)?, name)?;
        probe.data_mut()[i] = orig - h;
        let down = finite(f(&probe)?, name)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * opts.h));
        an.push(finite(analytic.data()[i], name)?);
    }
    Ok(GradCheckEntry {
        name: name.to_string(),
        checked: idx.len(),
        total: x.len(),
        max_rel_err: relative_error(&an, &numeric),
    })
}

/// Checks every learnable tensor of `obj` and its input.
pub fn grad_check<T: Scalar, O: Objective<T> + ?Sized>(
    obj: &mut O,
    x: &Tensor4<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let dx = obj.gradient(x)?;
    let analytic: Vec<(String, bool, Vec<T>)> = obj
        .tensors_mut()
        .into_iter()
        .map(|t| {
            let g = t.tensor.grad().map(|g| g.to_vec()).unwrap_or_default();
            (t.name, t.learnable, g)
        })
        .collect();

    let mut entries = Vec::new();
    let h = T::lit(opts.h);
    for (ti, (name, learnable, grad)) in analytic.iter().enumerate() {
        if !learnable {
            continue;
        }
        let idx = pick(grad.len(), opts, ti as u64);
        let mut numeric = Vec::with_capacity(idx.len());
        let mut an = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = obj.tensors_mut()[ti].tensor.data()[i];
            obj.tensors_mut()[ti].tensor.data_mut()[i] = orig + h;
            let up = finite(obj.value(x)?, name)?;
            obj.tensors_mut()[ti].tensor.data_mut()[i] = orig - h;
            let down = finite(obj.value(x)?, name)?;
            obj.tensors_mut()[ti].tensor.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * opts.h));
            an.push(finite(grad[i], name)?);
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            checked: idx.len(),
            total: grad.len(),
            max_rel_err: relative_error(&an, &numeric),
        });
    }
    entries.push(check_input_gradient("input", |p| obj.value(p), x, &dx, opts)?);
    Ok(GradCheckReport::from_entries(entries, opts))
}

/// Wraps a [`Module`] as the objective `Σ w ⊙ module(x)` with fixed random
/// weights `w ~ U(−1, 1)`.
pub struct ModuleObjective<'m, T: Scalar, M: Module<T> + ?Sized> {
    pub module: &'m mut M,
    pub mode: Mode,
    seed: u64,
    weights: Option<Tensor4<T>>,
}

impl<'m, T: Scalar, M: Module<T> + ?Sized> ModuleObjective<'m, T, M> {
    pub fn new(module: &'m mut M, mode: Mode, seed: u64) -> Self {
        Self {
            module,
            mode,
            seed,
            weights: None,
        }
    }

    fn weights_for(&mut self, dims: [usize; 4]) -> &Tensor4<T> {
        if self.weights.as_ref().map(|w| w.dims()) != Some(dims) {
            self.weights = Some(random_weights(dims, self.seed));
        }
        self.weights.as_ref().expect("weights")
    }
}

pub fn random_weights<T: Scalar>(dims: [usize; 4], seed: u64) -> Tensor4<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect())
        .expect("weight dims")
}

pub fn weighted_sum<T: Scalar>(y: &Tensor4<T>, w: &Tensor4<T>) -> T {
    y.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum()
}

impl<T: Scalar, M: Module<T> + ?Sized> Objective<T> for ModuleObjective<'_, T, M> {
    fn value(&mut self, x: &Tensor4<T>) -> Result<T> {
        let y = self.module.forward(x, self.mode)?;
        let w = self.weights_for(y.dims()).clone();
        Ok(weighted_sum(&y, &w))
    }

    fn gradient(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        for t in self.module.all_tensors_mut() {
            t.tensor.zero_grad();
        }
        let y = self.module.forward(x, self.mode)?;
        let w = self.weights_for(y.dims()).clone();
        self.module.backward(&w)
    }

    fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        self.module.all_tensors_mut()
    }
}

pub fn check_module<T: Scalar, M: Module<T> + ?Sized>(
    module: &mut M,
    x: &Tensor4<T>,
    mode: Mode,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut obj = ModuleObjective::new(module, mode, opts.seed ^ 0x5eed);
    grad_check(&mut obj, x, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::Relu;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, -2.0], &[1.0, -1.0]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let wrong = Tensor4::from_vec([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let e = check_input_gradient("sq", |t| Ok(t.data().iter().map(|v| v * v).sum()), &x, &wrong, &GradCheckOptions::exhaustive(1e-4, 1e-6)).unwrap();
        assert!(e.max_rel_err > 0.1);
    }

    #[test]
    fn relu_positive_inputs_machine_noise() {
        let x = Tensor4::from_vec([1, 2, 2, 2], (1..=8).map(|v| v as f64 * 0.3).collect()).unwrap();
        let r = check_module(&mut Relu::new(), &x, Mode::Eval, &GradCheckOptions::exhaustive(1e-3, 1e-9)).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r}");
    }

    #[test]
    fn subsample_is_seeded() {
        let o = GradCheckOptions::sampled(1e-3, 1e-6, 5, 42);
        assert_eq!(pick(100, &o, 3), pick(100, &o, 3));
        assert_eq!(pick(100, &o, 3).len(), 5);
        assert_eq!(pick(4, &o, 3), vec![0, 1, 2, 3]);
    }
}

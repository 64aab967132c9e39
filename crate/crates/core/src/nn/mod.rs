//! Differentiable building blocks: tensors, layers with hand-written
//! backward passes, parameter accounting and finite-difference checking.

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod ops;
mod tensor;

pub use conv::{Conv2d, ConvGeom, ConvTranspose2d};
pub use gradcheck::{check_module, grad_check, GradCheckOptions, GradCheckReport, Objective};
pub use norm::BatchNorm2d;
pub use ops::{add_skip, concat, split_channels, AdaptiveAvgPool2d, MaxPool2d, Relu, Sigmoid, UpsampleBilinear};
pub use tensor::Tensor4;

use crate::error::Result;
use crate::scalar::Scalar;

/// Forward-pass mode.
///
/// `Train` uses batch statistics and caches activations for backward, `Eval`
/// uses running statistics and caches, `Infer` uses running statistics and
/// caches nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Infer,
}

impl Mode {
    pub fn caches(self) -> bool {
        self != Mode::Infer
    }

    pub fn batch_stats(self) -> bool {
        self == Mode::Train
    }
}

pub struct NamedTensor<'a, T: Scalar> {
    pub name: String,
    pub tensor: &'a Tensor4<T>,
    pub learnable: bool,
}

impl<'a, T: Scalar> NamedTensor<'a, T> {
    pub fn param(name: String, tensor: &'a Tensor4<T>) -> Self {
        Self { name, tensor, learnable: true }
    }

    pub fn buffer(name: String, tensor: &'a Tensor4<T>) -> Self {
        Self { name, tensor, learnable: false }
    }
}

pub struct NamedTensorMut<'a, T: Scalar> {
    pub name: String,
    pub tensor: &'a mut Tensor4<T>,
    pub learnable: bool,
}

impl<'a, T: Scalar> NamedTensorMut<'a, T> {
    pub fn param(name: String, tensor: &'a mut Tensor4<T>) -> Self {
        Self { name, tensor, learnable: true }
    }

    pub fn buffer(name: String, tensor: &'a mut Tensor4<T>) -> Self {
        Self { name, tensor, learnable: false }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A single-input, single-output differentiable map.
///
/// `backward` consumes the cache of the most recent caching `forward`,
/// accumulates parameter gradients, and returns the input gradient.
pub trait Module<T: Scalar> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>>;
    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>>;

    fn tensors<'a>(&'a self, _prefix: &str, _out: &mut Vec<NamedTensor<'a, T>>) {}
    fn tensors_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<NamedTensorMut<'a, T>>) {}
    fn clear_cache(&mut self) {}

    fn all_tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut v = Vec::new();
        self.tensors("", &mut v);
        v
    }

    fn all_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        let mut v = Vec::new();
        self.tensors_mut("", &mut v);
        v
    }

    /// Learnable element count; running statistics are not counted.
    fn param_count(&self) -> usize {
        self.all_tensors()
            .iter()
            .filter(|t| t.learnable)
            .map(|t| t.tensor.len())
            .sum()
    }

    fn zero_grad(&mut self) {
        for t in self.all_tensors_mut() {
            t.tensor.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    BatchNorm,
    Relu,
    Sigmoid,
    MaxPool,
    AdaptiveAvgPool,
    UpsampleBilinear,
}

/// One layer of a sequential stack. Skip additions and concatenations are
/// graph combinators ([`add_skip`], [`concat`]) used by composite blocks.
#[derive(Debug, Clone)]
pub enum Layer<T: Scalar> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu(Relu<T>),
    Sigmoid(Sigmoid<T>),
    MaxPool(MaxPool2d),
    AdaptiveAvgPool(AdaptiveAvgPool2d),
    UpsampleBilinear(UpsampleBilinear),
}

macro_rules! each_layer {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            Layer::Conv($l) => $body,
            Layer::ConvTranspose($l) => $body,
            Layer::BatchNorm($l) => $body,
            Layer::Relu($l) => $body,
            Layer::Sigmoid($l) => $body,
            Layer::MaxPool($l) => $body,
            Layer::AdaptiveAvgPool($l) => $body,
            Layer::UpsampleBilinear($l) => $body,
        }
    };
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::ConvTranspose(_) => LayerKind::ConvTranspose,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu(_) => LayerKind::Relu,
            Layer::Sigmoid(_) => LayerKind::Sigmoid,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::AdaptiveAvgPool(_) => LayerKind::AdaptiveAvgPool,
            Layer::UpsampleBilinear(_) => LayerKind::UpsampleBilinear,
        }
    }

    /// Learnable elements implied by the layer hyperparameters.
    pub fn declared_params(&self) -> usize {
        match self {
            Layer::Conv(c) => c.out_channels * c.in_channels * c.kernel * c.kernel + c.bias.as_ref().map_or(0, |_| c.out_channels),
            Layer::ConvTranspose(c) => {
                c.in_channels * c.out_channels * c.kernel * c.kernel + c.bias.as_ref().map_or(0, |_| c.out_channels)
            }
            Layer::BatchNorm(b) => 2 * b.channels,
            _ => 0,
        }
    }
}

impl<T: Scalar> Module<T> for Layer<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        each_layer!(self, l => l.forward(x, mode))
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        each_layer!(self, l => l.backward(grad))
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        each_layer!(self, l => l.tensors(prefix, out))
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        each_layer!(self, l => l.tensors_mut(prefix, out))
    }

    fn clear_cache(&mut self) {
        each_layer!(self, l => Module::<T>::clear_cache(l))
    }
}

/// Moves biases, norm affine pairs and running statistics off their
/// initial values (zeros and ones) to a seeded generic point. At
/// initialization, zero biases make many pre-activations exactly zero,
/// which puts ReLU kinks under every bias perturbation of a finite-difference
/// check.
pub fn randomize_affine<T: Scalar>(tensors: &mut [NamedTensorMut<'_, T>], seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for t in tensors.iter_mut() {
        let range = match t.name.rsplit('.').next().unwrap_or_default() {
            "bias" | "beta" | "running_mean" => -0.2..0.2,
            "gamma" | "running_var" => 0.5..1.5,
            _ => continue,
        };
        for v in t.tensor.data_mut() {
            *v = T::lit(rng.random_range(range.clone()));
        }
    }
}

/// Sum of learnable elements over a list of layers.
pub fn param_count<T: Scalar>(layers: &[Layer<T>]) -> usize {
    layers.iter().map(|l| l.param_count()).sum()
}

/// Layers applied in order; parameters are named `<index>.<param>`.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.tensors(&join(prefix, &i.to_string()), out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.tensors_mut(&join(prefix, &i.to_string()), out);
        }
    }

    fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Layer::<f32>::Conv(Conv2d::new(&mut rng, 3, 64, 7, 2, 3, true));
        assert_eq!(conv.param_count(), 9472);
        assert_eq!(conv.declared_params(), 9472);
        let bn = Layer::<f32>::BatchNorm(BatchNorm2d::new(64));
        assert_eq!(bn.param_count(), 128);
        let ct = Layer::<f32>::ConvTranspose(ConvTranspose2d::new(&mut rng, 16, 8, 3, 2, 1, 1, false));
        assert_eq!(ct.param_count(), 16 * 8 * 9);
        let layers = vec![conv, bn, ct, Layer::Relu(Relu::new()), Layer::MaxPool(MaxPool2d::new(2, 2, 0))];
        assert_eq!(param_count(&layers), 9472 + 128 + 1152);
        for l in &layers {
            assert_eq!(l.param_count(), l.declared_params());
        }
    }

    #[test]
    fn sequential_names_and_forward_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seq = Sequential::<f64>::new(vec![
            Layer::Conv(Conv2d::new(&mut rng, 1, 2, 3, 1, 1, false)),
            Layer::BatchNorm(BatchNorm2d::new(2)),
            Layer::Relu(Relu::new()),
        ]);
        let names: Vec<_> = seq.all_tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names, ["0.weight", "1.gamma", "1.beta", "1.running_mean", "1.running_var"]);
        let before = seq.param_count();
        seq.forward(&Tensor4::filled([2, 1, 4, 4], 0.5), Mode::Train).unwrap();
        assert_eq!(seq.param_count(), before);
        assert_eq!(before, 18 + 4);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seq = Sequential::<f32>::new(vec![
            Layer::Conv(Conv2d::new(&mut rng, 3, 4, 3, 2, 1, true)),
            Layer::Sigmoid(Sigmoid::new()),
        ]);
        let x = Tensor4::from_vec([1, 3, 6, 6], (0..108).map(|v| (v as f32).sin()).collect()).unwrap();
        let a = seq.forward(&x, Mode::Infer).unwrap();
        let b = seq.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

use super::{join, Mode, Module, NamedTensor, NamedTensorMut, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
struct BnCache<T: Scalar> {
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-channel batch normalization with affine scale/shift.
///
/// Train mode normalizes with biased batch statistics and updates the
/// running estimates (unbiased variance) with momentum 0.1. Eval mode uses
/// the running estimates. Running statistics are buffers, not parameters.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub channels: usize,
    pub gamma: Tensor4<T>,
    pub beta: Tensor4<T>,
    pub running_mean: Tensor4<T>,
    pub running_var: Tensor4<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Tensor4::param([1, channels, 1, 1], vec![T::one(); channels]),
            beta: Tensor4::param([1, channels, 1, 1], vec![T::zero(); channels]),
            running_mean: Tensor4::zeros([1, channels, 1, 1]),
            running_var: Tensor4::filled([1, channels, 1, 1], T::one()),
            cache: None,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let [n, c, _, _] = x.dims();
        if c != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm over {} channels got {c}",
                self.channels
            )));
        }
        let plane = x.plane();
        let count = n * plane;
        let eps = T::lit(BN_EPS);
        let (mean, inv_std): (Vec<T>, Vec<T>) = if mode.batch_stats() {
            if count < 2 {
                return Err(Error::DegenerateBatch(count));
            }
            let momentum = BN_MOMENTUM;
            let mut means = Vec::with_capacity(c);
            let mut invs = Vec::with_capacity(c);
            for ch in 0..c {
                let mut s = 0.0f64;
                for i in 0..n {
                    s += x.item(i)[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0f64;
                for i in 0..n {
                    ss += x.item(i)[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| (v.as_f64() - m).powi(2))
                        .sum::<f64>();
                }
                let var = ss / count as f64;
                let unbiased = ss / (count - 1) as f64;
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = T::lit((1.0 - momentum) * rm.as_f64() + momentum * m);
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = T::lit((1.0 - momentum) * rv.as_f64() + momentum * unbiased);
                means.push(T::lit(m));
                invs.push(T::lit(1.0 / (var + BN_EPS).sqrt()));
            }
            (means, invs)
        } else {
            (
                self.running_mean.data().to_vec(),
                self.running_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect(),
            )
        };

        let mut xhat = Tensor4::zeros(x.dims());
        let mut out = Tensor4::zeros(x.dims());
        for i in 0..n {
            let src = x.item(i);
            for ch in 0..c {
                let (m, is) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let r = ch * plane..(ch + 1) * plane;
                let xh = &mut xhat.item_mut(i)[r.clone()];
                for (d, &v) in xh.iter_mut().zip(&src[r.clone()]) {
                    *d = (v - m) * is;
                }
                let xh = &xhat.item(i)[r.clone()];
                for (o, &v) in out.item_mut(i)[r].iter_mut().zip(xh) {
                    *o = g * v + b;
                }
            }
        }
        self.cache = mode.caches().then(|| BnCache {
            xhat,
            inv_std,
            batch_stats: mode.batch_stats(),
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache("batchnorm2d"))?;
        cache.xhat.same_dims(grad, "batchnorm upstream grad")?;
        let [n, c, _, _] = grad.dims();
        let plane = grad.plane();
        let count = T::lit((n * plane) as f64);
        let mut dx = Tensor4::zeros(grad.dims());
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for i in 0..n {
                for (&g, &xh) in grad.item(i)[r.clone()].iter().zip(&cache.xhat.item(i)[r.clone()]) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.gamma.grad_mut().expect("gamma grad")[ch] += sum_dy_xhat;
            self.beta.grad_mut().expect("beta grad")[ch] += sum_dy;
            let g = self.gamma.data()[ch];
            let is = cache.inv_std[ch];
            for i in 0..n {
                let xh = &cache.xhat.item(i)[r.clone()];
                let gy = &grad.item(i)[r.clone()];
                let d = &mut dx.item_mut(i)[r.clone()];
                if cache.batch_stats {
                    // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                    let k = g * is / count;
                    for j in 0..plane {
                        d[j] = k * (count * gy[j] - sum_dy - xh[j] * sum_dy_xhat);
                    }
                } else {
                    for j in 0..plane {
                        d[j] = gy[j] * g * is;
                    }
                }
            }
        }
        Ok(dx)
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        out.push(NamedTensor::param(join(prefix, "gamma"), &self.gamma));
        out.push(NamedTensor::param(join(prefix, "beta"), &self.beta));
        out.push(NamedTensor::buffer(join(prefix, "running_mean"), &self.running_mean));
        out.push(NamedTensor::buffer(join(prefix, "running_var"), &self.running_var));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        out.push(NamedTensorMut::param(join(prefix, "gamma"), &mut self.gamma));
        out.push(NamedTensorMut::param(join(prefix, "beta"), &mut self.beta));
        out.push(NamedTensorMut::buffer(join(prefix, "running_mean"), &mut self.running_mean));
        out.push(NamedTensorMut::buffer(join(prefix, "running_var"), &mut self.running_var));
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

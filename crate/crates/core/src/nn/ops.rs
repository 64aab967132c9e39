//! Parameter-free layers and graph combinators.

use super::{Mode, Module, Tensor4};
use crate::error::{Error, Result};
use crate::imagecore::bilinear_source;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Default)]
pub struct Relu<T: Scalar> {
    out: Option<Tensor4<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { out: None }
    }
}

impl<T: Scalar> Module<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let y = x.map(|v| v.max(T::zero()));
        self.out = mode.caches().then(|| y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let out = self.out.as_ref().ok_or(Error::NoForwardCache("relu"))?;
        grad.zip_map(out, |g, y| if y > T::zero() { g } else { T::zero() })
    }

    fn clear_cache(&mut self) {
        self.out = None;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T: Scalar> {
    out: Option<Tensor4<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self { out: None }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Module<T> for Sigmoid<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let y = x.map(sigmoid);
        self.out = mode.caches().then(|| y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let out = self.out.as_ref().ok_or(Error::NoForwardCache("sigmoid"))?;
        grad.zip_map(out, |g, y| g * y * (T::one() - y))
    }

    fn clear_cache(&mut self) {
        self.out = None;
    }
}

/// Max pooling; padded positions never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    fn out_len(&self, len: usize) -> Result<usize> {
        let span = len + 2 * self.padding;
        if span < self.kernel || self.padding * 2 > self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "maxpool k{} p{} on length {len}",
                self.kernel, self.padding
            )));
        }
        Ok((span - self.kernel) / self.stride + 1)
    }
}

impl<T: Scalar> Module<T> for MaxPool2d {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let [n, c, h, w] = x.dims();
        let (oh, ow) = (self.out_len(h)?, self.out_len(w)?);
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(out.len());
        let p = self.padding as isize;
        for i in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ky in 0..self.kernel {
                            let iy = (y * self.stride + ky) as isize - p;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (xx * self.stride + kx) as isize - p;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let idx = x.index(i, ch, iy as usize, ix as usize);
                                let v = x.data()[idx];
                                if v > best || best_idx == usize::MAX {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = out.index(i, ch, y, xx);
                        out.data_mut()[o] = best;
                        argmax.push(best_idx);
                    }
                }
            }
        }
        self.cache = mode.caches().then_some((x.dims(), argmax));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (dims, argmax) = self.cache.as_ref().ok_or(Error::NoForwardCache("maxpool2d"))?;
        if grad.len() != argmax.len() {
            return Err(Error::ShapeMismatch("maxpool upstream grad".into()));
        }
        let mut dx = Tensor4::zeros(*dims);
        for (&g, &idx) in grad.data().iter().zip(argmax) {
            dx.data_mut()[idx] += g;
        }
        Ok(dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Adaptive average pooling to `out_h×out_w`; bin `i` spans
/// `[⌊i·H/out⌋, ⌈(i+1)·H/out⌉)`.
#[derive(Debug, Clone)]
pub struct AdaptiveAvgPool2d {
    pub out_h: usize,
    pub out_w: usize,
    cache: Option<[usize; 4]>,
}

fn bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
        .collect()
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for AdaptiveAvgPool2d {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let [n, c, h, w] = x.dims();
        if self.out_h == 0 || self.out_w == 0 || self.out_h > h || self.out_w > w {
            return Err(Error::ShapeMismatch(format!(
                "adaptive pool to {}x{} from {h}x{w}",
                self.out_h, self.out_w
            )));
        }
        let (rb, cb) = (bins(h, self.out_h), bins(w, self.out_w));
        let mut out = Tensor4::zeros([n, c, self.out_h, self.out_w]);
        for i in 0..n {
            for ch in 0..c {
                for (oy, &(y0, y1)) in rb.iter().enumerate() {
                    for (ox, &(x0, x1)) in cb.iter().enumerate() {
                        let mut s = T::zero();
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                s += x.at(i, ch, y, xx);
                            }
                        }
                        let o = out.index(i, ch, oy, ox);
                        out.data_mut()[o] = s / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    }
                }
            }
        }
        self.cache = mode.caches().then_some(x.dims());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let dims = self.cache.ok_or(Error::NoForwardCache("adaptive_avgpool"))?;
        let [n, c, h, w] = dims;
        if grad.dims() != [n, c, self.out_h, self.out_w] {
            return Err(Error::ShapeMismatch("adaptive pool upstream grad".into()));
        }
        let (rb, cb) = (bins(h, self.out_h), bins(w, self.out_w));
        let mut dx = Tensor4::zeros(dims);
        for i in 0..n {
            for ch in 0..c {
                for (oy, &(y0, y1)) in rb.iter().enumerate() {
                    for (ox, &(x0, x1)) in cb.iter().enumerate() {
                        let g = grad.at(i, ch, oy, ox) / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                let idx = dx.index(i, ch, y, xx);
                                dx.data_mut()[idx] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Bilinear upsampling with the same align-corners=false sampling as
/// [`crate::imagecore::resize_bilinear`].
#[derive(Debug, Clone)]
pub struct UpsampleBilinear {
    pub out_h: usize,
    pub out_w: usize,
    cache: Option<[usize; 4]>,
}

impl UpsampleBilinear {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for UpsampleBilinear {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let [n, c, h, w] = x.dims();
        let rows: Vec<_> = (0..self.out_h).map(|y| bilinear_source(y, h, self.out_h)).collect();
        let cols: Vec<_> = (0..self.out_w).map(|v| bilinear_source(v, w, self.out_w)).collect();
        let mut out = Tensor4::zeros([n, c, self.out_h, self.out_w]);
        for i in 0..n {
            for ch in 0..c {
                for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                    let fy = T::lit(fy);
                    for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                        let fx = T::lit(fx);
                        let top = x.at(i, ch, y0, x0) * (T::one() - fx) + x.at(i, ch, y0, x1) * fx;
                        let bot = x.at(i, ch, y1, x0) * (T::one() - fx) + x.at(i, ch, y1, x1) * fx;
                        let o = out.index(i, ch, oy, ox);
                        out.data_mut()[o] = top * (T::one() - fy) + bot * fy;
                    }
                }
            }
        }
        self.cache = mode.caches().then_some(x.dims());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let dims = self.cache.ok_or(Error::NoForwardCache("upsample_bilinear"))?;
        let [n, c, h, w] = dims;
        if grad.dims() != [n, c, self.out_h, self.out_w] {
            return Err(Error::ShapeMismatch("upsample upstream grad".into()));
        }
        let rows: Vec<_> = (0..self.out_h).map(|y| bilinear_source(y, h, self.out_h)).collect();
        let cols: Vec<_> = (0..self.out_w).map(|v| bilinear_source(v, w, self.out_w)).collect();
        let mut dx = Tensor4::zeros(dims);
        for i in 0..n {
            for ch in 0..c {
                for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                    let fy = T::lit(fy);
                    for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                        let fx = T::lit(fx);
                        let g = grad.at(i, ch, oy, ox);
                        let d = dx.data_mut();
                        let base = (i * c + ch) * h * w;
                        d[base + y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                        d[base + y0 * w + x1] += g * (T::one() - fy) * fx;
                        d[base + y1 * w + x0] += g * fy * (T::one() - fx);
                        d[base + y1 * w + x1] += g * fy * fx;
                    }
                }
            }
        }
        Ok(dx)
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Elementwise sum of two same-shaped tensors (skip connection). The
/// backward of `add_skip` hands the upstream gradient to both operands.
pub fn add_skip<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    a.zip_map(b, |x, y| x + y)
}

/// Channel concatenation.
pub fn concat<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    let [n, _, h, w] = first.dims();
    if parts.iter().any(|p| p.n() != n || p.h() != h || p.w() != w) {
        return Err(Error::ShapeMismatch(format!(
            "concat shapes {:?}",
            parts.iter().map(|p| p.dims()).collect::<Vec<_>>()
        )));
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(i));
        }
    }
    Tensor4::from_vec([n, c, h, w], data)
}

/// Backward of [`concat`]: splits a gradient into per-part channel blocks.
pub fn split_channels<T: Scalar>(grad: &Tensor4<T>, channels: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let [n, c, h, w] = grad.dims();
    if channels.iter().sum::<usize>() != c {
        return Err(Error::ShapeMismatch(format!("split {channels:?} of {c} channels")));
    }
    let plane = h * w;
    let mut out: Vec<Vec<T>> = channels.iter().map(|&k| Vec::with_capacity(n * k * plane)).collect();
    for i in 0..n {
        let item = grad.item(i);
        let mut off = 0;
        for (dst, &k) in out.iter_mut().zip(channels) {
            dst.extend_from_slice(&item[off * plane..(off + k) * plane]);
            off += k;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(d, &k)| Tensor4::from_vec([n, k, h, w], d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_module, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random values kept at least `gap` away from zero.
    fn away_from_zero(dims: [usize; 4], seed: u64, gap: f64) -> Tensor4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor4::from_vec(
            dims,
            (0..n)
                .map(|_| {
                    let v: f64 = r.random_range(gap..1.0);
                    if r.random_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    /// Distinct values (a shuffled ramp with spacing 0.01) so max-pool winners are stable.
    fn distinct(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        Tensor4::from_vec(dims, vals).unwrap()
    }

    fn opts() -> GradCheckOptions {
        GradCheckOptions::exhaustive(1e-3, 1e-6)
    }

    #[test]
    fn relu_identity_on_nonnegative() {
        let x = distinct([1, 2, 3, 3], 1);
        assert_eq!(Relu::new().forward(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn maxpool_small_case() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = MaxPool2d::new(2, 2, 0).forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_padded_shape() {
        let x = distinct([1, 1, 8, 8], 2);
        let y = MaxPool2d::new(3, 2, 1).forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dims(), [1, 1, 4, 4]);
    }

    #[test]
    fn adaptive_pool_global_mean() {
        let x = distinct([1, 1, 4, 6], 3);
        let y = AdaptiveAvgPool2d::new(1, 1).forward(&x, Mode::Eval).unwrap();
        let mean = x.data().iter().sum::<f64>() / 24.0;
        assert!((y.data()[0] - mean).abs() < 1e-12);
        assert_eq!(bins(5, 2), vec![(0, 3), (2, 5)]);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor4::filled([1, 2, 2, 3], 0.25f64);
        let y = UpsampleBilinear::new(8, 5).forward(&x, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn concat_then_split_round_trip() {
        let a = distinct([2, 1, 2, 2], 4);
        let b = distinct([2, 3, 2, 2], 5);
        let c = concat(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), [2, 4, 2, 2]);
        let parts = split_channels(&c, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat(&[&a, &distinct([1, 1, 2, 2], 6)]).is_err());
    }

    #[test]
    fn finite_difference_checks() {
        let dims = [2, 3, 8, 8];
        let r = check_module(&mut Relu::new(), &away_from_zero(dims, 7, 0.01), Mode::Eval, &opts()).unwrap();
        assert!(r.passed, "relu {r}");
        let r = check_module(&mut Sigmoid::new(), &away_from_zero(dims, 8, 0.0), Mode::Eval, &opts()).unwrap();
        assert!(r.passed, "sigmoid {r}");
        let r = check_module(&mut MaxPool2d::new(2, 2, 0), &distinct(dims, 9), Mode::Eval, &opts()).unwrap();
        assert!(r.passed, "maxpool {r}");
        let r = check_module(&mut MaxPool2d::new(3, 2, 1), &distinct(dims, 10), Mode::Eval, &opts()).unwrap();
        assert!(r.passed, "maxpool padded {r}");
        for g in [1, 2, 3, 5] {
            let r = check_module(&mut AdaptiveAvgPool2d::new(g, g), &distinct(dims, 11), Mode::Eval, &opts())
                .unwrap();
            assert!(r.passed, "adaptive {g} {r}");
        }
        let r = check_module(&mut UpsampleBilinear::new(13, 16), &distinct(dims, 12), Mode::Eval, &opts()).unwrap();
        assert!(r.passed, "upsample {r}");
    }
}

//! Convolution and transposed convolution via im2col/col2im + GEMM.
//!
//! Convolution is cross-correlation (no kernel flip). Weights are laid out
//! `[out, in, k, k]` for [`Conv2d`] and `[in, out, k, k]` for
//! [`ConvTranspose2d`], so a transposed convolution is exactly the adjoint of
//! the convolution with the same weight tensor.

use rand::Rng;

use super::{join, Mode, Module, NamedTensor, NamedTensorMut, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::{Scalar, Strides};

/// Sliding-window geometry over one `channels×h×w` image producing `oh×ow`
/// window positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kernel || span_w < kernel || stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kernel} stride {stride} padding {padding} does not fit {h}x{w}"
            )));
        }
        Ok(Self {
            channels,
            h,
            w,
            kernel,
            stride,
            padding,
            oh: (span_h - kernel) / stride + 1,
            ow: (span_w - kernel) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate touched by output `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, padding: usize, len: usize) -> Option<usize> {
        let v = (o * stride + k) as isize - padding as isize;
        (v >= 0 && (v as usize) < len).then_some(v as usize)
    }

    /// `col[(c,ki,kj), (oy,ox)] = img[c, oy·s+ki−p, ox·s+kj−p]` (0 outside).
    pub fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        let p = self.positions();
        let (k, s, pad) = (self.kernel, self.stride, self.padding);
        for c in 0..self.channels {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * p;
                    let dst = &mut col[row..row + p];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Self::src(oy, ki, s, pad, self.h) {
                            None => line.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match Self::src(ox, kj, s, pad, self.w) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates `col` into `img`.
    pub fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        let p = self.positions();
        let (k, s, pad) = (self.kernel, self.stride, self.padding);
        for c in 0..self.channels {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * p;
                    let src = &col[row..row + p];
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, ki, s, pad, self.h) else {
                            continue;
                        };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for ox in 0..self.ow {
                            if let Some(ix) = Self::src(ox, kj, s, pad, self.w) {
                                dst[ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// He-uniform fan-in initialization: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<T: Scalar, R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
}

fn bias_grad<T: Scalar>(grad: &Tensor4<T>, bias: &mut Tensor4<T>) {
    let [n, c, _, _] = grad.dims();
    let plane = grad.plane();
    let g = bias.grad_mut().expect("bias is a parameter");
    for i in 0..n {
        let item = grad.item(i);
        for ch in 0..c {
            g[ch] += item[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
        }
    }
}

fn add_bias<T: Scalar>(out: &mut Tensor4<T>, bias: &Tensor4<T>) {
    let [n, c, _, _] = out.dims();
    let plane = out.plane();
    for i in 0..n {
        let item = out.item_mut(i);
        for ch in 0..c {
            let b = bias.data()[ch];
            item[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

#[derive(Debug, Clone)]
struct ConvCache<T: Scalar> {
    input_dims: [usize; 4],
    geom: ConvGeom,
    cols: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor4<T>,
    pub bias: Option<Tensor4<T>>,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let len = out_channels * fan_in;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor4::param(
                [out_channels, in_channels, kernel, kernel],
                he_uniform(rng, len, fan_in),
            ),
            bias: bias.then(|| Tensor4::param([1, out_channels, 1, 1], vec![T::zero(); out_channels])),
            cache: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let g = ConvGeom::new(self.in_channels, input[2], input[3], self.kernel, self.stride, self.padding)?;
        Ok([input[0], self.out_channels, g.oh, g.ow])
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let [n, c, h, w] = x.dims();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let geom = ConvGeom::new(c, h, w, self.kernel, self.stride, self.padding)?;
        let (rows, pos) = (geom.rows(), geom.positions());
        let mut out = Tensor4::zeros([n, self.out_channels, geom.oh, geom.ow]);
        let mut cols = Vec::with_capacity(if mode.caches() { n } else { 0 });
        let mut col = vec![T::zero(); rows * pos];
        for i in 0..n {
            geom.im2col(x.item(i), &mut col);
            T::gemm(
                self.out_channels,
                rows,
                pos,
                T::one(),
                self.weight.data(),
                Strides::row_major(rows),
                &col,
                Strides::row_major(pos),
                T::zero(),
                out.item_mut(i),
                Strides::row_major(pos),
            );
            if mode.caches() {
                cols.push(col.clone());
            }
        }
        if let Some(b) = &self.bias {
            add_bias(&mut out, b);
        }
        self.cache = mode.caches().then(|| ConvCache {
            input_dims: x.dims(),
            geom,
            cols,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache("conv2d"))?;
        let geom = cache.geom;
        let n = cache.input_dims[0];
        if grad.dims() != [n, self.out_channels, geom.oh, geom.ow] {
            return Err(Error::ShapeMismatch(format!(
                "conv upstream grad {:?}, expected {:?}",
                grad.dims(),
                [n, self.out_channels, geom.oh, geom.ow]
            )));
        }
        let (rows, pos) = (geom.rows(), geom.positions());
        let mut dx = Tensor4::zeros(cache.input_dims);
        let mut dcol = vec![T::zero(); rows * pos];
        for i in 0..n {
            let gy = grad.item(i);
            let (w, wg) = self.weight.value_and_grad_mut();
            T::gemm(
                self.out_channels,
                pos,
                rows,
                T::one(),
                gy,
                Strides::row_major(pos),
                &cache.cols[i],
                Strides::transposed(pos),
                T::one(),
                wg.expect("weight grad"),
                Strides::row_major(rows),
            );
            T::gemm(
                rows,
                self.out_channels,
                pos,
                T::one(),
                w,
                Strides::transposed(rows),
                gy,
                Strides::row_major(pos),
                T::zero(),
                &mut dcol,
                Strides::row_major(pos),
            );
            geom.col2im(&dcol, dx.item_mut(i));
        }
        if let Some(b) = self.bias.as_mut() {
            bias_grad(grad, b);
        }
        Ok(dx)
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        out.push(NamedTensor::param(join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push(NamedTensor::param(join(prefix, "bias"), b));
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        out.push(NamedTensorMut::param(join(prefix, "weight"), &mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            out.push(NamedTensorMut::param(join(prefix, "bias"), b));
        }
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Debug, Clone)]
struct ConvTCache<T: Scalar> {
    input: Tensor4<T>,
    geom: ConvGeom,
}

/// Transposed convolution; output size `(H−1)·s − 2p + k + output_padding`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub weight: Tensor4<T>,
    pub bias: Option<Tensor4<T>>,
    cache: Option<ConvTCache<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
    ) -> Self {
        assert!(output_padding < stride.max(1), "output_padding must be < stride");
        let fan_in = in_channels * kernel * kernel;
        let len = out_channels * fan_in;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight: Tensor4::param(
                [in_channels, out_channels, kernel, kernel],
                he_uniform(rng, len, fan_in),
            ),
            bias: bias.then(|| Tensor4::param([1, out_channels, 1, 1], vec![T::zero(); out_channels])),
            cache: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |x: usize| -> Result<usize> {
            ((x - 1) * self.stride + self.kernel + self.output_padding)
                .checked_sub(2 * self.padding)
                .filter(|&v| v >= 1)
                .ok_or_else(|| Error::ShapeMismatch(format!("transposed conv output for {x} is empty")))
        };
        Ok((f(h)?, f(w)?))
    }

    fn geom(&self, h: usize, w: usize) -> Result<ConvGeom> {
        let (oh, ow) = self.output_hw(h, w)?;
        let g = ConvGeom::new(self.out_channels, oh, ow, self.kernel, self.stride, self.padding)?;
        debug_assert_eq!((g.oh, g.ow), (h, w));
        Ok(g)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let [n, c, h, w] = x.dims();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let geom = self.geom(h, w)?;
        let (rows, pos) = (geom.rows(), geom.positions());
        let mut out = Tensor4::zeros([n, self.out_channels, geom.h, geom.w]);
        let mut col = vec![T::zero(); rows * pos];
        for i in 0..n {
            T::gemm(
                rows,
                c,
                pos,
                T::one(),
                self.weight.data(),
                Strides::transposed(rows),
                x.item(i),
                Strides::row_major(pos),
                T::zero(),
                &mut col,
                Strides::row_major(pos),
            );
            geom.col2im(&col, out.item_mut(i));
        }
        if let Some(b) = &self.bias {
            add_bias(&mut out, b);
        }
        self.cache = mode.caches().then(|| ConvTCache { input: x.detached(), geom });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache("conv_transpose2d"))?;
        let geom = cache.geom;
        let x = &cache.input;
        let n = x.n();
        if grad.dims() != [n, self.out_channels, geom.h, geom.w] {
            return Err(Error::ShapeMismatch(format!(
                "transposed conv upstream grad {:?}, expected {:?}",
                grad.dims(),
                [n, self.out_channels, geom.h, geom.w]
            )));
        }
        let (rows, pos) = (geom.rows(), geom.positions());
        let c = self.in_channels;
        let mut dx = Tensor4::zeros(x.dims());
        let mut dcol = vec![T::zero(); rows * pos];
        for i in 0..n {
            geom.im2col(grad.item(i), &mut dcol);
            let (w, wg) = self.weight.value_and_grad_mut();
            T::gemm(
                c,
                rows,
                pos,
                T::one(),
                w,
                Strides::row_major(rows),
                &dcol,
                Strides::row_major(pos),
                T::zero(),
                dx.item_mut(i),
                Strides::row_major(pos),
            );
            T::gemm(
                c,
                pos,
                rows,
                T::one(),
                x.item(i),
                Strides::row_major(pos),
                &dcol,
                Strides::transposed(pos),
                T::one(),
                wg.expect("weight grad"),
                Strides::row_major(rows),
            );
        }
        if let Some(b) = self.bias.as_mut() {
            bias_grad(grad, b);
        }
        Ok(dx)
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        out.push(NamedTensor::param(join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push(NamedTensor::param(join(prefix, "bias"), b));
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        out.push(NamedTensorMut::param(join(prefix, "weight"), &mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            out.push(NamedTensorMut::param(join(prefix, "bias"), b));
        }
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

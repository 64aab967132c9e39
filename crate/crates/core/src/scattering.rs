//! Atmospheric scattering model `I = J·t + A·(1 − t)`: haze synthesis, exact
//! scene recovery, and the single-variable K reformulation
//! `J = K·I − K + b` with `K = ((I − A)/t + (A − b)) / (I − 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{clamp01, Image};
use crate::scalar::Scalar;

/// Floor applied to synthesized transmission so it stays in `(0, 1]`.
pub const SYNTH_T_MIN: f64 = 1e-4;
/// Default transmission floor for recovery.
pub const RECOVER_T_MIN: f64 = 0.05;
/// Guard keeping `I − 1` away from the pole of the K map.
pub const K_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionMap<T: Scalar = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> TransmissionMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "transmission map {height}x{width} with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v > T::zero() && **v <= T::one())) {
            return Err(Error::InvalidArgument(format!("transmission {v} outside (0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, t: T) -> Result<Self> {
        Self::new(height, width, vec![t; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T: Scalar = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "depth map {height}x{width} with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= T::zero())) {
            return Err(Error::InvalidArgument(format!("depth {v} is negative or non-finite")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

/// Global airlight (an RGB triple) or a per-pixel airlight map.
#[derive(Debug, Clone, PartialEq)]
pub enum AtmosphericLight<T: Scalar = f32> {
    Uniform([T; 3]),
    Map(Image<T>),
}

impl<T: Scalar> AtmosphericLight<T> {
    pub fn gray(a: T) -> Result<Self> {
        Self::rgb([a, a, a])
    }

    pub fn rgb(rgb: [T; 3]) -> Result<Self> {
        if rgb.iter().any(|v| !(v.is_finite() && *v >= T::zero() && *v <= T::one())) {
            return Err(Error::InvalidArgument(format!("airlight {rgb:?} outside [0, 1]")));
        }
        Ok(Self::Uniform(rgb))
    }

    /// Airlight at pixel `(y, x)` for channel `c`. A uniform triple applied to
    /// a one-channel image uses its first component; a map with fewer
    /// channels than the image is broadcast.
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        match self {
            Self::Uniform(rgb) => rgb[c.min(2)],
            Self::Map(img) => img.get(y, x, c.min(img.channels() - 1)),
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        match self {
            Self::Map(img) if img.height() != h || img.width() != w => Err(Error::ShapeMismatch(format!(
                "airlight map {}x{} vs image {h}x{w}",
                img.height(),
                img.width()
            ))),
            _ => Ok(()),
        }
    }

    /// Materializes as an `h×w×3` map.
    pub fn to_map(&self, h: usize, w: usize) -> Result<Image<T>> {
        self.check(h, w)?;
        Image::from_fn(h, w, 3, |y, x, c| self.at(y, x, c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterParams {
    pub beta: f64,
    pub airlight: [f64; 3],
    pub bias: f64,
}

impl Default for ScatterParams {
    fn default() -> Self {
        Self {
            beta: 1.5,
            airlight: [0.75; 3],
            bias: 0.0,
        }
    }
}

fn check_t<T: Scalar>(img: &Image<T>, t: &TransmissionMap<T>) -> Result<()> {
    if img.height() != t.height || img.width() != t.width {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs transmission {}x{}",
            img.height(),
            img.width(),
            t.height,
            t.width
        )));
    }
    Ok(())
}

/// `t = max(exp(−β·d), 1e-4)`.
pub fn transmission_from_depth<T: Scalar>(d: &DepthMap<T>, beta: T) -> Result<TransmissionMap<T>> {
    if !(beta.is_finite() && beta > T::zero()) {
        return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
    }
    let floor = T::lit(SYNTH_T_MIN);
    let data = d.data.iter().map(|&v| (-beta * v).exp().max(floor)).collect();
    TransmissionMap::new(d.height, d.width, data)
}

/// `I = J·t + A·(1 − t)` elementwise; transmission is shared across channels.
pub fn synthesize_haze<T: Scalar>(
    clean: &Image<T>,
    t: &TransmissionMap<T>,
    a: &AtmosphericLight<T>,
) -> Result<Image<T>> {
    check_t(clean, t)?;
    a.check(clean.height(), clean.width())?;
    let (h, w, c) = clean.dims();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let tv = t.get(y, x);
            for ch in 0..c {
                data.push(clean.get(y, x, ch) * tv + a.at(y, x, ch) * (T::one() - tv));
            }
        }
    }
    Image::from_clamped(h, w, c, data)
}

/// Unclamped inversion `J = (I − A·(1 − t'))/t'` with `t' = max(t, t_min)`,
/// channel-last.
pub fn recover_scene_raw<T: Scalar>(
    hazy: &Image<T>,
    t: &TransmissionMap<T>,
    a: &AtmosphericLight<T>,
    t_min: T,
) -> Result<Vec<T>> {
    if !(t_min > T::zero()) {
        return Err(Error::InvalidArgument(format!("t_min must be > 0, got {t_min}")));
    }
    check_t(hazy, t)?;
    a.check(hazy.height(), hazy.width())?;
    let (h, w, c) = hazy.dims();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let tv = t.get(y, x).max(t_min);
            for ch in 0..c {
                let av = a.at(y, x, ch);
                data.push((hazy.get(y, x, ch) - av * (T::one() - tv)) / tv);
            }
        }
    }
    Ok(data)
}

/// Scene radiance estimate, clamped to `[0, 1]`.
pub fn recover_scene<T: Scalar>(
    hazy: &Image<T>,
    t: &TransmissionMap<T>,
    a: &AtmosphericLight<T>,
    t_min: T,
) -> Result<Image<T>> {
    let raw = recover_scene_raw(hazy, t, a, t_min)?;
    Image::from_clamped(hazy.height(), hazy.width(), hazy.channels(), raw)
}

/// Per-pixel, per-channel K map (channel-last, same layout as the image).
#[derive(Debug, Clone, PartialEq)]
pub struct KMap<T: Scalar = f32> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> KMap<T> {
    pub fn filled(height: usize, width: usize, channels: usize, k: T) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![k; height * width * channels],
        }
    }
}

/// `K = ((I − A)/t + (A − b)) / (I − 1)` with `I` replaced by
/// `min(I, 1 − 1e-6)` in the whole expression.
pub fn k_transform<T: Scalar>(
    hazy: &Image<T>,
    t: &TransmissionMap<T>,
    a: &AtmosphericLight<T>,
    b: T,
) -> Result<KMap<T>> {
    check_t(hazy, t)?;
    a.check(hazy.height(), hazy.width())?;
    let (h, w, c) = hazy.dims();
    let cap = T::one() - T::lit(K_EPS);
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let tv = t.get(y, x);
            for ch in 0..c {
                let i = hazy.get(y, x, ch).min(cap);
                let av = a.at(y, x, ch);
                data.push(((i - av) / tv + (av - b)) / (i - T::one()));
            }
        }
    }
    Ok(KMap {
        height: h,
        width: w,
        channels: c,
        data,
    })
}

/// Unclamped `J = K·I − K + b`.
pub fn apply_k_raw<T: Scalar>(k: &KMap<T>, hazy: &Image<T>, b: T) -> Result<Vec<T>> {
    if (k.height, k.width, k.channels) != hazy.dims() {
        return Err(Error::ShapeMismatch(format!(
            "K map {}x{}x{} vs image {:?}",
            k.height,
            k.width,
            k.channels,
            hazy.dims()
        )));
    }
    Ok(k.data.iter().zip(hazy.data()).map(|(&kv, &i)| kv * i - kv + b).collect())
}

/// `J = K·I − K + b`, clamped to `[0, 1]`.
pub fn apply_k<T: Scalar>(k: &KMap<T>, hazy: &Image<T>, b: T) -> Result<Image<T>> {
    let raw = apply_k_raw(k, hazy, b)?;
    Image::new(hazy.height(), hazy.width(), hazy.channels(), raw.into_iter().map(clamp01).collect())
}

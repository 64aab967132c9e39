//! PSNR and Gaussian-windowed SSIM, plus dataset-level aggregation.
//!
//! SSIM works on the channel-mean grayscale image and averages the SSIM map
//! over valid (unpadded) window positions. The analytic gradient used by the
//! SSIM loss lives here too, next to the forward it differentiates.

use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::scalar::Scalar;

/// PSNR in decibels; identical images carry the `Infinite` tag and serialize
/// as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => match f.precision() {
                Some(p) => write!(f, "{v:.p$}"),
                None => write!(f, "{v}"),
            },
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PsnrRepr {
    Num(f64),
    Tag(String),
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => PsnrRepr::Num(*v),
            Psnr::Infinite => PsnrRepr::Tag("inf".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match PsnrRepr::deserialize(d)? {
            PsnrRepr::Num(v) => Ok(Psnr::Finite(v)),
            PsnrRepr::Tag(t) if t == "inf" => Ok(Psnr::Infinite),
            PsnrRepr::Tag(t) => Err(serde::de::Error::custom(format!("bad psnr tag {t:?}"))),
        }
    }
}

fn check_shapes<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())))
    }
}

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    check_shapes(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// `10·log10(L²/MSE)`.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>, l: f64) -> Result<Psnr> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::InvalidArgument(format!("dynamic range must be > 0, got {l}")));
    }
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, l))
}

pub fn psnr_from_mse(mse: f64, l: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(20.0 * l.log10() - 10.0 * mse.log10())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub l: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            l: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!("ssim window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.l > 0.0) {
            return Err(Error::InvalidArgument("ssim sigma, k1, k2, L must be > 0".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = g.iter().zip(&line[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (j, &gj) in g.iter().enumerate() {
            let r = &rows[(y + j) * ow..(y + j + 1) * ow];
            for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(r) {
                *o += gj * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh×ow` map back to `h×w`.
fn filter_valid_adjoint(grad: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for (j, &gj) in g.iter().enumerate() {
            let dst = &mut rows[(y + j) * ow..(y + j + 1) * ow];
            for (d, &v) in dst.iter_mut().zip(&grad[y * ow..(y + 1) * ow]) {
                *d += gj * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (i, &gi) in g.iter().enumerate() {
                out[y * w + x + i] += gi * v;
            }
        }
    }
    out
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64]) -> Moments {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    Moments {
        mx: filter_valid(x, h, w, g),
        my: filter_valid(y, h, w, g),
        exx: filter_valid(&sq(x, x), h, w, g),
        eyy: filter_valid(&sq(y, y), h, w, g),
        exy: filter_valid(&sq(x, y), h, w, g),
    }
}

fn check_plane(h: usize, w: usize, p: &SsimParams) -> Result<()> {
    p.validate()?;
    if h < p.window || w < p.window {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than ssim window {}",
            p.window
        )));
    }
    Ok(())
}

/// Mean SSIM of two `h×w` grayscale planes.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> Result<f64> {
    check_plane(h, w, p)?;
    let m = moments(x, y, h, w, &p.taps());
    let (c1, c2) = ((p.k1 * p.l).powi(2), (p.k2 * p.l).powi(2));
    let n = m.mx.len();
    let s: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (m.mx[i], m.my[i]);
            let vx = m.exx[i] - mx * mx;
            let vy = m.eyy[i] - my * my;
            let cxy = m.exy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(s / n as f64)
}

/// Mean SSIM and its gradient with respect to `x`.
pub fn ssim_plane_grad(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> Result<(f64, Vec<f64>)> {
    check_plane(h, w, p)?;
    let g = p.taps();
    let m = moments(x, y, h, w, &g);
    let (c1, c2) = ((p.k1 * p.l).powi(2), (p.k2 * p.l).powi(2));
    let n = m.mx.len();
    let inv_n = 1.0 / n as f64;
    let (mut d_mu, mut d_exx, mut d_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (m.mx[i], m.my[i]);
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * (m.exy[i] - mx * my) + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = (m.exx[i] - mx * mx) + (m.eyy[i] - my * my) + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        d_mu[i] = inv_n * (2.0 * my * (a2 - a1) / (b1 * b2) - s * (2.0 * mx / b1 - 2.0 * mx / b2));
        d_exx[i] = inv_n * (-s / b2);
        d_exy[i] = inv_n * (2.0 * a1 / (b1 * b2));
    }
    let g_mu = filter_valid_adjoint(&d_mu, h, w, &g);
    let g_xx = filter_valid_adjoint(&d_exx, h, w, &g);
    let g_xy = filter_valid_adjoint(&d_exy, h, w, &g);
    let grad = (0..h * w).map(|i| g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i]).collect();
    Ok((total * inv_n, grad))
}

fn gray_plane<T: Scalar>(img: &Image<T>) -> Vec<f64> {
    img.to_gray().data().iter().map(|v| v.as_f64()).collect()
}

pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>, p: &SsimParams) -> Result<f64> {
    check_shapes(a, b)?;
    ssim_plane(&gray_plane(a), &gray_plane(b), a.height(), a.width(), p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairQuality {
    pub index: usize,
    pub psnr_db: Psnr,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub per_image: Vec<PairQuality>,
    /// Mean over finite values; `Infinite` only when every pair is identical.
    pub psnr_mean: Psnr,
    pub psnr_std: f64,
    pub psnr_infinite_count: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl QualityReport {
    pub fn from_pairs(per_image: Vec<PairQuality>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::InvalidArgument("no image pairs to evaluate".into()));
        }
        let finite: Vec<f64> = per_image.iter().filter_map(|q| q.psnr_db.finite()).collect();
        let ssims: Vec<f64> = per_image.iter().map(|q| q.ssim).collect();
        let (pm, ps) = mean_std(&finite);
        let (sm, ss) = mean_std(&ssims);
        Ok(Self {
            psnr_mean: if finite.is_empty() { Psnr::Infinite } else { Psnr::Finite(pm) },
            psnr_std: ps,
            psnr_infinite_count: per_image.len() - finite.len(),
            ssim_mean: sm,
            ssim_std: ss,
            per_image,
        })
    }

    /// Plain `key = value` summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images = {}", self.per_image.len());
        let _ = writeln!(s, "psnr_mean_db = {:.4}", self.psnr_mean);
        let _ = writeln!(s, "psnr_std_db = {:.4}", self.psnr_std);
        let _ = writeln!(s, "psnr_infinite_count = {}", self.psnr_infinite_count);
        let _ = writeln!(s, "ssim_mean = {:.6}", self.ssim_mean);
        let _ = writeln!(s, "ssim_std = {:.6}", self.ssim_std);
        s
    }

    /// One JSON record per image.
    pub fn to_jsonl(&self) -> String {
        self.per_image
            .iter()
            .map(|q| serde_json::to_string(q).expect("serializable") + "\n")
            .collect()
    }
}

/// Per-pair PSNR (L = 1) and SSIM, computed in parallel and aggregated in
/// input order.
pub fn evaluate_pairs<T: Scalar>(pairs: &[(Image<T>, Image<T>)], p: &SsimParams) -> Result<QualityReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no image pairs to evaluate".into()));
    }
    let per: Vec<PairQuality> = pairs
        .par_iter()
        .enumerate()
        .map(|(index, (out, truth))| {
            Ok(PairQuality {
                index,
                psnr_db: psnr(out, truth, p.l)?,
                ssim: ssim(out, truth, p)?,
            })
        })
        .collect::<Result<_>>()?;
    QualityReport::from_pairs(per)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| r.random_range(0.0..1.0)).unwrap()
    }

    /// Two-dimensional window sums with no separability, no shared buffers.
    fn naive_ssim(a: &Image<f64>, b: &Image<f64>, p: &SsimParams) -> f64 {
        let (h, w, c) = a.dims();
        let gray = |img: &Image<f64>, y: usize, x: usize| (0..c).map(|k| img.get(y, x, k)).sum::<f64>() / c as f64;
        let k = p.window;
        let r = (k / 2) as f64;
        let mut win = vec![vec![0.0; k]; k];
        let mut tot = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * p.sigma * p.sigma)).exp();
                tot += *v;
            }
        }
        let (c1, c2) = ((p.k1 * p.l).powi(2), (p.k2 * p.l).powi(2));
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i][j] / tot;
                        let (va, vb) = (gray(a, y0 + i, x0 + j), gray(b, y0 + i, x0 + j));
                        ma += g * va;
                        mb += g * vb;
                        saa += g * va * va;
                        sbb += g * vb * vb;
                        sab += g * va * vb;
                    }
                }
                let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(5, 4, 3, 0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Psnr::Infinite);
        let half = Image::filled(4, 4, 3, 0.5f64).unwrap();
        let six = Image::filled(4, 4, 3, 0.6f64).unwrap();
        let db = psnr(&half, &six, 1.0).unwrap().finite().unwrap();
        assert!((db - 20.0).abs() < 1e-9, "{db}");
        let b = random_image(5, 4, 3, 1);
        let mut s = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            s += (x - y) * (x - y);
        }
        let oracle = 10.0 * (1.0 / (s / 60.0)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap().finite().unwrap() - oracle).abs() < 1e-9);
        assert!(psnr(&a, &random_image(4, 4, 3, 1), 1.0).is_err());
    }

    #[test]
    fn psnr_sentinel_serialization() {
        assert_eq!(serde_json::to_string(&Psnr::Infinite).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&Psnr::Finite(20.5)).unwrap(), "20.5");
        let back: Psnr = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(back, Psnr::Infinite);
        assert!(serde_json::from_str::<Psnr>("\"nan\"").is_err());
    }

    #[test]
    fn ssim_examples() {
        let p = SsimParams::default();
        let a = random_image(16, 13, 3, 2);
        assert_eq!(ssim(&a, &a, &p).unwrap(), 1.0);
        let x = Image::filled(11, 11, 1, 0.5f64).unwrap();
        let y = Image::filled(11, 11, 1, 0.25f64).unwrap();
        // (2·0.125 + 1e-4) / (0.3125 + 1e-4), variances zero
        let expect = 0.2501 / 0.3126;
        assert!((ssim(&x, &y, &p).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.80006).abs() < 1e-5);
        assert!(ssim(&random_image(10, 20, 1, 0), &random_image(10, 20, 1, 1), &p).is_err());
    }

    #[test]
    fn ssim_matches_brute_force_window() {
        let p = SsimParams::default();
        for seed in 0..3 {
            let a = random_image(17, 14, 3, seed);
            let b = random_image(17, 14, 3, seed + 10);
            let fast = ssim(&a, &b, &p).unwrap();
            assert!((fast - naive_ssim(&a, &b, &p)).abs() < 1e-6);
        }
        let q = SsimParams { window: 5, sigma: 0.8, ..p };
        let (a, b) = (random_image(9, 7, 1, 5), random_image(9, 7, 1, 6));
        assert!((ssim(&a, &b, &q).unwrap() - naive_ssim(&a, &b, &q)).abs() < 1e-6);
    }

    #[test]
    fn ssim_gradient_matches_differences() {
        let p = SsimParams::default();
        let (h, w) = (14, 13);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..h * w).map(|_| r.random_range(0.1..0.9)).collect();
        let y: Vec<f64> = (0..h * w).map(|_| r.random_range(0.1..0.9)).collect();
        let (v, g) = ssim_plane_grad(&x, &y, h, w, &p).unwrap();
        assert!((v - ssim_plane(&x, &y, h, w, &p).unwrap()).abs() < 1e-15);
        let eps = 1e-6;
        let mut worst = 0.0f64;
        let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..h * w {
            let mut up = x.clone();
            up[i] += eps;
            let mut dn = x.clone();
            dn[i] -= eps;
            let num = (ssim_plane(&up, &y, h, w, &p).unwrap() - ssim_plane(&dn, &y, h, w, &p).unwrap()) / (2.0 * eps);
            worst = worst.max((num - g[i]).abs());
        }
        assert!(worst / gmax < 1e-6, "{worst} vs {gmax}");
    }

    #[test]
    fn evaluate_pairs_aggregation() {
        let p = SsimParams::default();
        let a = random_image(12, 12, 3, 7);
        let r = evaluate_pairs(&[(a.clone(), a.clone())], &p).unwrap();
        assert_eq!(r.ssim_mean, 1.0);
        assert_eq!(r.psnr_mean, Psnr::Infinite);
        assert_eq!(r.psnr_infinite_count, 1);

        let b = random_image(12, 12, 3, 8);
        let c = random_image(12, 12, 3, 9);
        let r = evaluate_pairs(&[(a.clone(), b.clone()), (a.clone(), c.clone()), (a.clone(), a.clone())], &p).unwrap();
        let p1 = psnr(&a, &b, 1.0).unwrap().finite().unwrap();
        let p2 = psnr(&a, &c, 1.0).unwrap().finite().unwrap();
        assert!((r.psnr_mean.finite().unwrap() - (p1 + p2) / 2.0).abs() < 1e-12);
        assert_eq!(r.psnr_infinite_count, 1);
        let s = (ssim(&a, &b, &p).unwrap() + ssim(&a, &c, &p).unwrap() + 1.0) / 3.0;
        assert!((r.ssim_mean - s).abs() < 1e-12);
        assert_eq!(r.to_jsonl().lines().count(), 3);
        assert!(r.to_jsonl().contains("\"inf\""));
        assert!(r.to_text().contains("psnr_infinite_count = 1"));
        assert!(evaluate_pairs::<f64>(&[], &p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let p = SsimParams::default();
            let (a, b) = (random_image(12, 12, 3, s1), random_image(12, 12, 3, s2));
            let ab = ssim(&a, &b, &p).unwrap();
            prop_assert_eq!(ab, ssim(&b, &a, &p).unwrap());
            // independent noise can anti-correlate within a window, so only the
            // general bound holds here
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }

        #[test]
        fn psnr_decreases_with_noise(seed in 0u64..1000, amp in 0.01f64..0.2, extra in 0.01f64..0.2) {
            let base = Image::filled(8, 8, 3, 0.5f64).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..192).map(|_| r.random_range(-1.0..1.0)).collect();
            let noisy = |a: f64| Image::new(8, 8, 3, u.iter().map(|v| 0.5 + a * v).collect()).unwrap();
            let lo = psnr(&base, &noisy(amp), 1.0).unwrap().finite().unwrap();
            let hi = psnr(&base, &noisy(amp + extra), 1.0).unwrap().finite().unwrap();
            prop_assert!(hi < lo);
        }
    }
}

//! Image containers, raster I/O, resizing, patch extraction and paired
//! augmentation.
//!
//! Images are stored channel-last (`HWC`), row-major, with every element in
//! `[0, 1]`. Grayscale images have one channel, color images three.

use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use image::{ColorType, ImageDecoder, ImageFormat, ImageReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor4;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Image<T: Scalar = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("{channels} channels (need 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} != {height}*{width}*{channels}",
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from arbitrary values, clamping each into `[0, 1]`.
    /// Non-finite values map to 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_finite() { clamp01(v) } else { T::zero() })
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_clamped(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Mean over channels at every pixel, as a one-channel image.
    pub fn to_gray(&self) -> Image<T> {
        if self.channels == 1 {
            return self.clone();
        }
        let inv = T::one() / T::lit(self.channels as f64);
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().copied().sum::<T>() * inv)
            .collect();
        Image::from_clamped(self.height, self.width, 1, data).expect("valid dims")
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn same_shape(&self, other: &Image<T>) -> bool {
        self.dims() == other.dims()
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image<T>> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let row = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        Ok(Image {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }
}

#[inline]
pub(crate) fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Stacks same-shaped images into an `N×C×H×W` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[Image<T>]) -> Result<Tensor4<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to stack".into()))?;
    let (h, w, c) = first.dims();
    let mut out = Tensor4::zeros([images.len(), c, h, w]);
    for (n, img) in images.iter().enumerate() {
        if img.dims() != (h, w, c) {
            return Err(Error::ShapeMismatch(format!(
                "image {n} is {:?}, expected {:?}",
                img.dims(),
                (h, w, c)
            )));
        }
        let plane = h * w;
        let base = n * c * plane;
        let dst = out.data_mut();
        for (p, px) in img.data.chunks_exact(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                dst[base + ch * plane + p] = *v;
            }
        }
    }
    Ok(out)
}

/// Splits an `N×C×H×W` tensor (C ∈ {1, 3}) into images, clamping into `[0, 1]`.
pub fn tensor_to_images<T: Scalar>(t: &Tensor4<T>) -> Result<Vec<Image<T>>> {
    let [n, c, h, w] = t.dims();
    let plane = h * w;
    (0..n)
        .map(|i| {
            let src = &t.data()[i * c * plane..(i + 1) * c * plane];
            let mut data = Vec::with_capacity(c * plane);
            for p in 0..plane {
                for ch in 0..c {
                    data.push(src[ch * plane + p]);
                }
            }
            Image::from_clamped(h, w, c, data)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// raster I/O

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Loads an 8-bit PNG (gray or RGB) or binary PPM/PGM. Each code `v` maps to `v/255`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let corrupt = |detail: String| Error::CorruptHeader {
        path: path.to_path_buf(),
        detail,
    };
    let file = fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut head = [0u8; 8];
    let mut reader = BufReader::new(file);
    let read = reader.read(&mut head).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let format = if read == 8 && head == PNG_SIGNATURE {
        ImageFormat::Png
    } else if read >= 2 && head[0] == b'P' && matches!(head[1], b'5' | b'6') {
        ImageFormat::Pnm
    } else {
        return Err(corrupt("neither a PNG signature nor a binary P5/P6 header".into()));
    };

    let decoder = ImageReader::with_format(
        BufReader::new(fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?),
        format,
    )
    .into_decoder()
    .map_err(|e| corrupt(e.to_string()))?;
    let color = decoder.color_type();
    let channels = match color {
        ColorType::L8 => 1,
        ColorType::Rgb8 => 3,
        ColorType::L16 | ColorType::Rgb16 | ColorType::La16 | ColorType::Rgba16 => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                detail: format!("{color:?}"),
            })
        }
        other => {
            return Err(Error::InvalidImage(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    let (w, h) = decoder.dimensions();
    let mut bytes = vec![0u8; decoder.total_bytes() as usize];
    decoder
        .read_image(&mut bytes)
        .map_err(|e| corrupt(e.to_string()))?;
    let inv = T::one() / T::lit(255.0);
    let data = bytes.iter().map(|&b| T::lit(b as f64) * inv).collect();
    Image::new(h as usize, w as usize, channels, data)
}

/// Quantizes with `round_half_away_from_zero(v·255)`.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes PNG for `.png` paths and binary PNM (P6 color, P5 gray) for
/// `.ppm`/`.pgm`/`.pnm`.
pub fn save_image<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let encoded = match ext.as_str() {
        "ppm" | "pgm" | "pnm" => {
            let magic = if img.channels == 3 { "P6" } else { "P5" };
            let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&bytes);
            out
        }
        "png" => {
            let mut out = Vec::new();
            let color = if img.channels == 3 {
                image::ExtendedColorType::Rgb8
            } else {
                image::ExtendedColorType::L8
            };
            image::write_buffer_with_format(
                &mut std::io::Cursor::new(&mut out),
                &bytes,
                img.width as u32,
                img.height as u32,
                color,
                ImageFormat::Png,
            )
            .map_err(|e| Error::InvalidImage(e.to_string()))?;
            out
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unsupported output extension {other:?} for {}",
                path.display()
            )))
        }
    };
    fs::write(path, encoded).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// resampling

/// Source coordinate for output index `dst` under the align-corners=false
/// convention: `src = (dst + 0.5)·(in/out) − 0.5`, clamped below at 0. The
/// returned pair is `(i0, i1, frac)` with `i1 = min(i0 + 1, in − 1)`.
#[inline]
pub(crate) fn bilinear_source(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Bilinear resize (align-corners=false, see [`bilinear_source`]).
pub fn resize_bilinear<T: Scalar>(img: &Image<T>, out_h: usize, out_w: usize) -> Result<Image<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let c = img.channels;
    let rows: Vec<_> = (0..out_h).map(|y| bilinear_source(y, img.height, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| bilinear_source(x, img.width, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &rows {
        let fy = T::lit(fy);
        for &(x0, x1, fx) in &cols {
            let fx = T::lit(fx);
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (T::one() - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (T::one() - fx) + img.get(y1, x1, ch) * fx;
                data.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Image::from_clamped(out_h, out_w, c, data)
}

// ---------------------------------------------------------------------------
// patches

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
    pub scales: Vec<f64>,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument("patch_size and stride must be >= 1".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "scales must be nonempty and in (0, 1]: {:?}",
                self.scales
            )));
        }
        Ok(())
    }

    /// Closed-form tile count for an `h×w` source.
    pub fn count(&self, h: usize, w: usize) -> usize {
        self.scales
            .iter()
            .map(|&s| {
                let (hs, ws) = scaled_dims(h, w, s);
                if hs < self.patch_size || ws < self.patch_size {
                    0
                } else {
                    ((hs - self.patch_size) / self.stride + 1) * ((ws - self.patch_size) / self.stride + 1)
                }
            })
            .sum()
    }
}

fn scaled_dims(h: usize, w: usize, s: f64) -> (usize, usize) {
    (
        ((s * h as f64).floor() as usize).max(1),
        ((s * w as f64).floor() as usize).max(1),
    )
}

/// Multi-scale tiling: scale-major, then row-major within each scale.
pub fn extract_patches<T: Scalar>(img: &Image<T>, spec: &PatchSpec) -> Result<Vec<Image<T>>> {
    spec.validate()?;
    let p = spec.patch_size;
    let mut out = Vec::new();
    for &s in &spec.scales {
        let (hs, ws) = scaled_dims(img.height, img.width, s);
        if hs < p || ws < p {
            continue;
        }
        let scaled = resize_bilinear(img, hs, ws)?;
        for top in (0..=hs - p).step_by(spec.stride) {
            for left in (0..=ws - p).step_by(spec.stride) {
                out.push(scaled.crop(top, left, p, p)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no scale of a {}x{} image fits a {p}-pixel patch",
            img.height, img.width
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// augmentation

/// Counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn turns(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub crop_size: usize,
    pub rotations: Vec<Rotation>,
    pub seed: u64,
}

/// Rotates counter-clockwise by `turns` quarter turns.
pub fn rotate_quarter<T: Scalar>(img: &Image<T>, turns: usize) -> Image<T> {
    let mut cur = img.clone();
    for _ in 0..turns % 4 {
        let (h, w, c) = cur.dims();
        let mut data = Vec::with_capacity(cur.data.len());
        // new image is w×h; new(y, x) = old(x, w-1-y)
        for y in 0..w {
            for x in 0..h {
                for ch in 0..c {
                    data.push(cur.get(x, w - 1 - y, ch));
                }
            }
        }
        cur = Image {
            height: w,
            width: h,
            channels: c,
            data,
        };
    }
    cur
}

/// Applies one seeded crop window and quarter-turn rotation to both images.
pub fn augment_pair<T: Scalar>(
    a: &Image<T>,
    b: &Image<T>,
    spec: &AugmentSpec,
) -> Result<(Image<T>, Image<T>)> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "pair dims {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if spec.crop_size == 0 || spec.crop_size > a.height.min(a.width) {
        return Err(Error::InvalidArgument(format!(
            "crop size {} does not fit {}x{}",
            spec.crop_size, a.height, a.width
        )));
    }
    if spec.rotations.is_empty() {
        return Err(Error::InvalidArgument("no rotations to choose from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let top = rng.random_range(0..=a.height - spec.crop_size);
    let left = rng.random_range(0..=a.width - spec.crop_size);
    let rot = spec.rotations[rng.random_range(0..spec.rotations.len())];
    let apply = |img: &Image<T>| -> Result<Image<T>> {
        let cropped = img.crop(top, left, spec.crop_size, spec.crop_size)?;
        Ok(rotate_quarter(&cropped, rot.turns()))
    };
    Ok((apply(a)?, apply(b)?))
}

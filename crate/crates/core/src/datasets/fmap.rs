//! FMAP: little-endian f32 rasters.
//!
//! ```text
//! "FMAP" | u32 version = 1 | u32 height | u32 width | u32 channels | f32 × h·w·c
//! ```
//!
//! Values are row-major, channel-last. The version field doubles as an
//! endianness canary: a byte-swapped 1 marks a big-endian file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::scalar::Scalar;
use crate::scattering::{DepthMap, TransmissionMap};

pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";
pub const FMAP_VERSION: u32 = 1;
pub const FMAP_HEADER_LEN: usize = 20;

/// Unbounded f32 raster, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!("empty raster {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "raster {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_image<T: Scalar>(img: &Image<T>) -> Self {
        let (h, w, c) = img.dims();
        Self::new(h, w, c, img.data().iter().map(|v| v.as_f64() as f32).collect()).expect("image dims")
    }

    pub fn from_transmission<T: Scalar>(t: &TransmissionMap<T>) -> Self {
        Self::new(t.height(), t.width(), 1, t.data().iter().map(|v| v.as_f64() as f32).collect()).expect("map dims")
    }

    pub fn from_depth<T: Scalar>(d: &DepthMap<T>) -> Self {
        Self::new(d.height(), d.width(), 1, d.data().iter().map(|v| v.as_f64() as f32).collect()).expect("map dims")
    }

    fn cast<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::lit(v as f64)).collect()
    }

    fn single_channel(&self, what: &str) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::ShapeMismatch(format!("{what} raster has {} channels, need 1", self.channels)));
        }
        Ok(())
    }

    pub fn to_image<T: Scalar>(&self) -> Result<Image<T>> {
        Image::new(self.height, self.width, self.channels, self.cast())
    }

    pub fn to_depth<T: Scalar>(&self) -> Result<DepthMap<T>> {
        self.single_channel("depth")?;
        DepthMap::new(self.height, self.width, self.cast())
    }

    pub fn to_transmission<T: Scalar>(&self) -> Result<TransmissionMap<T>> {
        self.single_channel("transmission")?;
        TransmissionMap::new(self.height, self.width, self.cast())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FMAP_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&FMAP_MAGIC);
        for v in [FMAP_VERSION, self.height as u32, self.width as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes FMAP bytes; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |detail: String| Error::CorruptHeader {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < FMAP_HEADER_LEN {
            return Err(corrupt(format!("{} bytes is shorter than the {FMAP_HEADER_LEN}-byte header", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != FMAP_MAGIC {
            return Err(Error::BadMagic { expected: FMAP_MAGIC, found: magic });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version == FMAP_VERSION.swap_bytes() {
            return Err(corrupt("big-endian FMAP (version canary reads byte-swapped)".into()));
        }
        if version != FMAP_VERSION {
            return Err(Error::BadVersion {
                expected: FMAP_VERSION,
                found: version,
            });
        }
        let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let expect = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(c))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| corrupt(format!("dims {h}x{w}x{c} overflow")))?;
        let payload = &bytes[FMAP_HEADER_LEN..];
        if payload.len() != expect {
            return Err(corrupt(format!("payload is {} bytes, dims {h}x{w}x{c} need {expect}", payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Self::new(h, w, c, data).map_err(|e| corrupt(e.to_string()))
    }
}

pub fn write_fmap(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, raster.to_bytes()).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    Raster::from_bytes(&bytes, path)
}

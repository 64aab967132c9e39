//! FDHZ checkpoints.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! "FDHZ" | version | kind tag | config length | config (JSON)
//! tensor count | per tensor: name length | name | 4 dims | f32 values
//! ```
//!
//! Every parameter and running statistic is stored, in graph order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{FastNetConfig, ModelGraph, ModelKind};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"FDHZ";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: FastNetConfig,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: [usize; 4],
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &ModelGraph<T>) -> Self {
        Self {
            kind: model.kind(),
            config: model.config().clone(),
            tensors: model
                .tensors()
                .iter()
                .map(|t| StoredTensor {
                    name: t.name.clone(),
                    dims: t.tensor.dims(),
                    data: t.tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.kind.tag());
        put_u32(&mut out, config.len() as u32);
        out.extend_from_slice(&config);
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            for d in t.dims {
                put_u32(&mut out, d as u32);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "header")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(Error::BadVersion { expected: VERSION, found: version });
        }
        let tag = r.u32("header")?;
        let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::ConfigMismatch(format!("unknown model kind tag {tag}")))?;
        let len = r.u32("config")? as usize;
        let config: FastNetConfig = serde_json::from_slice(r.take(len, "config")?)
            .map_err(|e| Error::ConfigMismatch(format!("unreadable config block: {e}")))?;
        let count = r.u32("tensor table")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let label = format!("tensor #{i}");
            let len = r.u32(&label)? as usize;
            let name = String::from_utf8(r.take(len, &label)?.to_vec())
                .map_err(|_| Error::ConfigMismatch(format!("{label} has a non-UTF-8 name")))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32(&name)? as usize;
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Truncated(name.clone()))?, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(StoredTensor { name, dims, data });
        }
        Ok(Self { kind, config, tensors })
    }

    /// Copies stored values into `model`, whose kind and config must match.
    pub fn apply<T: Scalar>(&self, model: &mut ModelGraph<T>) -> Result<()> {
        if model.kind() != self.kind {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds a {:?} model, target is {:?}",
                self.kind,
                model.kind()
            )));
        }
        if model.config() != &self.config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {:?} differs from model config {:?}",
                self.config,
                model.config()
            )));
        }
        let mut by_name: HashMap<&str, &StoredTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for dst in model.tensors_mut() {
            let src = by_name.remove(dst.name.as_str()).ok_or_else(|| Error::MissingTensor(dst.name.clone()))?;
            if src.dims != dst.tensor.dims() {
                return Err(Error::TensorShape {
                    name: dst.name,
                    expected: dst.tensor.dims(),
                    found: src.dims,
                });
            }
            for (d, &v) in dst.tensor.data_mut().iter_mut().zip(&src.data) {
                *d = T::lit(v as f64);
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::ConfigMismatch(format!("checkpoint tensor {extra} has no place in the model")));
        }
        Ok(())
    }

    pub fn build<T: Scalar>(&self) -> Result<ModelGraph<T>> {
        let mut model = ModelGraph::build(self.kind, &self.config, 0)?;
        self.apply(&mut model)?;
        Ok(model)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    if source.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub fn save_checkpoint<T: Scalar>(model: &ModelGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::capture(model).write(path)
}

/// Builds the model described by the checkpoint at `path`.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<T>> {
    Checkpoint::read(path)?.build()
}

/// Loads into an existing model, rejecting a different kind or config.
pub fn load_into<T: Scalar>(model: &mut ModelGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::read(path)?.apply(model)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported bit depth in {path}: {detail}")]
    UnsupportedBitDepth { path: PathBuf, detail: String },
    #[error("corrupt or unrecognized header in {path}: {detail}")]
    CorruptHeader { path: PathBuf, detail: String },
    #[error("cannot write {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch too small for batch statistics: N*H*W = {0}, need at least 2")]
    DegenerateBatch(usize),
    #[error("backward called before a caching forward pass in {0}")]
    NoForwardCache(&'static str),
    #[error("input {h}x{w} is not divisible by 32; pad to {padded_h}x{padded_w}")]
    IndivisibleInput {
        h: usize,
        w: usize,
        padded_h: usize,
        padded_w: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing loss target: {0}")]
    MissingTarget(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint config/kind does not match model: {0}")]
    ConfigMismatch(String),
    #[error("tensor {name}: expected dims {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: [usize; 4],
        found: [usize; 4],
    },
    #[error("checkpoint has no tensor named {0}")]
    MissingTensor(String),

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("config error: {0}")]
    Config(String),
}

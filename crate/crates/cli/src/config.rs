//! The `--config` file: optional `[model]`, `[train]`, `[synth]` and
//! `[bench]` tables plus a top-level `seed`. Flags override file values.

use std::fs;
use std::path::Path;

use dehaze_core::bench::BenchSpec;
use dehaze_core::datasets::SynthesisSpec;
use dehaze_core::models::{EncoderKind, FastNetConfig, ModelKind};
use dehaze_core::training::TrainConfig;
use dehaze_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub train: Option<TrainConfig>,
    pub synth: Option<SynthesisSpec>,
    pub bench: Option<BenchSpec>,
}

/// A preset with optional field overrides.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub kind: Option<ModelKind>,
    pub encoder_kind: Option<EncoderKind>,
    pub blocks_per_stage: Option<[usize; 4]>,
    pub base_width: Option<usize>,
    pub feature_channels: Option<usize>,
    pub refinement_scales: Option<Vec<usize>>,
    pub t_min: Option<f64>,
}

impl ModelSection {
    /// Resolves the preset (`flag` first, then the file, then `fallback`)
    /// and applies the file's overrides.
    pub fn resolve(&self, flag: Option<&str>, fallback: &str) -> Result<(ModelKind, FastNetConfig)> {
        let name = flag.or(self.preset.as_deref()).unwrap_or(fallback);
        let (mut kind, mut cfg) = FastNetConfig::preset(name)?;
        if let Some(k) = self.kind {
            kind = k;
        }
        if let Some(v) = self.encoder_kind {
            cfg.encoder_kind = v;
        }
        if let Some(v) = self.blocks_per_stage {
            cfg.blocks_per_stage = v;
        }
        if let Some(v) = self.base_width {
            cfg.base_width = v;
        }
        if let Some(v) = self.feature_channels {
            cfg.feature_channels = v;
        }
        if let Some(v) = &self.refinement_scales {
            cfg.refinement_scales = v.clone();
        }
        if let Some(v) = self.t_min {
            cfg.t_min = v;
        }
        cfg.validate()?;
        Ok((kind, cfg))
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                }
            }
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

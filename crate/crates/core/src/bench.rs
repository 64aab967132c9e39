//! Inference throughput sweeps over resolution and batch size.
//!
//! Each cell runs `warmup` untimed forwards, then `runs` timed forwards on
//! one fixed-seed input already in memory. FPS is `batch / mean seconds`.
//! Cells whose estimated working set exceeds the memory budget, or whose
//! forward fails, are recorded as infeasible and the sweep moves on.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{padded_dims, ModelGraph, ModelKind};
use crate::nn::{Mode, Tensor4};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// `(height, width)` pairs; sizes off the 32 grid are padded up.
    pub resolutions: Vec<(usize, usize)>,
    pub batch_sizes: Vec<usize>,
    pub runs: usize,
    pub warmup: usize,
    /// Report metadata only; arithmetic follows the scalar type.
    pub precision: String,
    pub seed: u64,
    /// Cells whose estimated working set exceeds this are skipped.
    pub memory_budget_bytes: Option<usize>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            resolutions: vec![(64, 64), (128, 128)],
            batch_sizes: vec![1, 8],
            runs: 20,
            warmup: 3,
            precision: "fp32".into(),
            seed: 0,
            memory_budget_bytes: None,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.resolutions.is_empty() || self.resolutions.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Config(format!("bad resolutions {:?}", self.resolutions)));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config(format!("bad batch sizes {:?}", self.batch_sizes)));
        }
        Ok(())
    }
}

/// Something whose forward pass can be timed.
pub trait InferenceTarget<T: Scalar> {
    fn label(&self) -> String;
    fn forward(&mut self, x: &Tensor4<T>) -> Result<()>;
    /// Rough working-set size of one forward, for the memory budget.
    fn estimate_bytes(&self, batch: usize, height: usize, width: usize) -> usize;
}

impl<T: Scalar> InferenceTarget<T> for ModelGraph<T> {
    fn label(&self) -> String {
        let cfg = self.config();
        let kind = match self.kind() {
            ModelKind::Fast => "FastNet",
            ModelKind::Dual => "DualFastNet",
        };
        format!("{kind}({:?}, w{}, F{})", cfg.encoder_kind, cfg.base_width, cfg.feature_channels).to_lowercase()
    }

    fn forward(&mut self, x: &Tensor4<T>) -> Result<()> {
        ModelGraph::forward(self, x, Mode::Infer).map(|_| ())
    }

    /// Parameters plus live activations: input, full-resolution features,
    /// and each encoder/decoder stage at its reduced size, doubled for the
    /// dual model's two trunks.
    fn estimate_bytes(&self, batch: usize, height: usize, width: usize) -> usize {
        let cfg = self.config();
        let pixels = (batch * height * width) as f64;
        let stages: f64 = cfg
            .stage_channels()
            .iter()
            .enumerate()
            .map(|(k, &c)| 2.0 * c as f64 / 4f64.powi(k as i32 + 2))
            .sum();
        let trunks = if self.kind() == ModelKind::Dual { 2.0 } else { 1.0 };
        let per_pixel = 3.0 + trunks * (2.5 * cfg.feature_channels as f64 + stages) + 3.0 * 49.0 / 4.0;
        let size = std::mem::size_of::<T>();
        self.tensors().iter().map(|t| t.tensor.len()).sum::<usize>() * size + (pixels * per_pixel) as usize * size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub status: CellStatus,
    /// Forwards actually executed, as counted by the harness.
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub fps: f64,
    pub latency_ms_per_image: f64,
    pub estimated_bytes: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub precision: String,
    pub host: String,
    pub runs: usize,
    pub warmup: usize,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table: size, batch, model, precision, FPS.
    pub fn to_table(&self) -> String {
        let rows: Vec<[String; 5]> = self
            .cells
            .iter()
            .map(|c| {
                [
                    format!("{}x{}", c.width, c.height),
                    c.batch.to_string(),
                    self.model.clone(),
                    self.precision.clone(),
                    match c.status {
                        CellStatus::Ok => format!("{:.2}", c.fps),
                        CellStatus::Infeasible => "infeasible".into(),
                    },
                ]
            })
            .collect();
        let header = ["Size", "Batch", "Model", "Precision", "FPS"].map(String::from);
        let mut widths = header.clone().map(|h| h.len());
        for r in &rows {
            for (w, v) in widths.iter_mut().zip(r) {
                *w = (*w).max(v.chars().count());
            }
        }
        let mut out = String::new();
        for r in std::iter::once(&header).chain(&rows) {
            let line: Vec<String> = r.iter().zip(&widths).map(|(v, &w)| format!("{v:<w$}")).collect();
            writeln!(out, "{}", line.join("  ").trim_end()).expect("string write");
        }
        out
    }

    pub fn cell(&self, height: usize, width: usize, batch: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| (c.height, c.width, c.batch) == (height, width, batch))
    }
}

/// OS, architecture and available parallelism.
pub fn host_fingerprint() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{}-{} ({threads} threads)", std::env::consts::OS, std::env::consts::ARCH)
}

fn random_input<T: Scalar>(dims: [usize; 4], seed: u64) -> Tensor4<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| T::lit(rng.random::<f64>())).collect()).expect("dims")
}

/// Sweeps resolutions (outer) by batch sizes (inner).
pub fn run_bench<T: Scalar>(target: &mut dyn InferenceTarget<T>, spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let mut cells = Vec::new();
    for (ri, &(h, w)) in spec.resolutions.iter().enumerate() {
        let (ph, pw) = padded_dims(h, w);
        let pad_note = ((ph, pw) != (h, w)).then(|| format!("padded to {ph}x{pw}"));
        for (bi, &batch) in spec.batch_sizes.iter().enumerate() {
            let estimated_bytes = target.estimate_bytes(batch, ph, pw);
            let mut cell = BenchCell {
                height: h,
                width: w,
                batch,
                status: CellStatus::Infeasible,
                warmup_runs: 0,
                timed_runs: 0,
                mean_seconds: 0.0,
                std_seconds: 0.0,
                fps: 0.0,
                latency_ms_per_image: 0.0,
                estimated_bytes,
                note: pad_note.clone(),
            };
            if spec.memory_budget_bytes.is_some_and(|b| estimated_bytes > b) {
                cell.note = Some(format!("estimated {estimated_bytes} bytes exceeds budget"));
                cells.push(cell);
                continue;
            }
            let x = random_input::<T>([batch, 3, ph, pw], spec.seed ^ ((ri as u64) << 32 | bi as u64));
            match time_cell(target, &x, spec, &mut cell) {
                Ok(()) => {}
                Err(e) => {
                    cell.status = CellStatus::Infeasible;
                    cell.note = Some(e.to_string());
                }
            }
            cells.push(cell);
        }
    }
    Ok(BenchReport {
        model: target.label(),
        precision: spec.precision.clone(),
        host: host_fingerprint(),
        runs: spec.runs,
        warmup: spec.warmup,
        cells,
    })
}

fn time_cell<T: Scalar>(target: &mut dyn InferenceTarget<T>, x: &Tensor4<T>, spec: &BenchSpec, cell: &mut BenchCell) -> Result<()> {
    for _ in 0..spec.warmup {
        target.forward(x)?;
        cell.warmup_runs += 1;
    }
    let mut secs = Vec::with_capacity(spec.runs);
    for _ in 0..spec.runs {
        let t0 = Instant::now();
        target.forward(x)?;
        secs.push(t0.elapsed().as_secs_f64());
        cell.timed_runs += 1;
    }
    let n = secs.len() as f64;
    let mean = secs.iter().sum::<f64>() / n;
    let var = if secs.len() > 1 { secs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let mean = mean.max(1e-9);
    cell.status = CellStatus::Ok;
    cell.mean_seconds = mean;
    cell.std_seconds = var.sqrt();
    cell.fps = x.n() as f64 / mean;
    cell.latency_ms_per_image = 1e3 * mean / x.n() as f64;
    Ok(())
}

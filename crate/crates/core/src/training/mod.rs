//! Adam, the epoch loop with per-epoch validation and early stopping,
//! loss fine-tuning, stage-wise DualFastNet training and FDHZ checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_update, Adam, AdamConfig, Moments};
pub use checkpoint::{load_checkpoint, load_into, save_checkpoint, Checkpoint, StoredTensor, MAGIC, VERSION};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{images_to_tensor, tensor_to_images, Image};
use crate::losses::{composite_loss, CompositeSpec, ContentExtractor, LossKind};
use crate::metrics::{psnr, psnr_from_mse, ssim, Psnr, SsimParams};
use crate::models::{ModelGraph, ModelOutput, Scope, Target};
use crate::nn::{Mode, Tensor4};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Base loss: a shorthand name (`mse`, `l1`, `ssim`, `content`,
    /// `mse_x1`, `mse_x4`) or a `terms` table.
    pub loss: CompositeSpec,
    /// Second loss for continued training after the base loss.
    pub refine_loss: Option<CompositeSpec>,
    /// Epoch budget for the refinement phase; `max_epochs` when unset.
    pub refine_epochs: Option<usize>,
    /// Directory receiving `best_loss.fdhz` and `best_ssim.fdhz`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 1,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            loss: CompositeSpec::mse_x1(),
            refine_loss: None,
            refine_epochs: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        self.loss.validate()?;
        if let Some(r) = &self.refine_loss {
            r.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training example as batch-of-one tensors. Transmission and airlight
/// truths are needed only by losses that supervise those outputs.
#[derive(Debug, Clone)]
pub struct Sample<T: Scalar> {
    pub hazy: Tensor4<T>,
    pub clean: Tensor4<T>,
    pub transmission: Option<Tensor4<T>>,
    pub airlight: Option<Tensor4<T>>,
}

impl<T: Scalar> Sample<T> {
    pub fn from_images(hazy: &Image<T>, clean: &Image<T>, transmission: Option<&Image<T>>, airlight: Option<&Image<T>>) -> Result<Self> {
        let one = |img: &Image<T>| images_to_tensor(std::slice::from_ref(img));
        let s = Self {
            hazy: one(hazy)?,
            clean: one(clean)?,
            transmission: transmission.map(one).transpose()?,
            airlight: airlight.map(one).transpose()?,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let [n, c, h, w] = self.hazy.dims();
        if n != 1 || c != 3 {
            return Err(Error::ShapeMismatch(format!("sample hazy image {:?}, need [1, 3, H, W]", self.hazy.dims())));
        }
        self.hazy.same_dims(&self.clean, "clean image")?;
        if let Some(t) = &self.transmission {
            if t.dims() != [1, 1, h, w] {
                return Err(Error::ShapeMismatch(format!("transmission {:?} for image {h}x{w}", t.dims())));
            }
        }
        if let Some(a) = &self.airlight {
            self.hazy.same_dims(a, "airlight map")?;
        }
        Ok(())
    }
}

struct Batch<T: Scalar> {
    input: Tensor4<T>,
    truths: ModelOutput<T>,
}

fn make_batch<T: Scalar>(samples: &[&Sample<T>]) -> Result<Batch<T>> {
    let stack = |f: &dyn Fn(&Sample<T>) -> Option<&Tensor4<T>>| -> Result<Option<Tensor4<T>>> {
        let parts: Option<Vec<&Tensor4<T>>> = samples.iter().map(|s| f(s)).collect();
        parts.map(|p| Tensor4::stack(&p)).transpose()
    };
    let clean = stack(&|s| Some(&s.clean))?;
    Ok(Batch {
        input: stack(&|s| Some(&s.hazy))?.expect("hazy"),
        truths: ModelOutput {
            refined: clean.clone(),
            dehazed: clean,
            transmission: stack(&|s| s.transmission.as_ref())?,
            airlight: stack(&|s| s.airlight.as_ref())?,
        },
    })
}

/// Counts consecutive epochs without strict validation-loss improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss; returns whether it improved on the best.
    pub fn update(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
    Diverged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStopped => "early_stopped",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub tag: String,
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    /// Mean PSNR of the training-mode outputs seen during the epoch.
    pub train_psnr: Psnr,
    pub val_loss: f64,
    pub val_psnr: Psnr,
    pub val_ssim: f64,
    pub saved_best_loss: bool,
    pub saved_best_ssim: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Loss label, with an arrow for fine-tuning (`MSE → SSIM`) or a stage name.
    pub tag: String,
    pub epochs: Vec<EpochRecord>,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }

    pub fn append_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| Error::Unwritable {
                path: path.to_path_buf(),
                source,
            })?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// A retained model with the validation scores it was saved at.
#[derive(Debug, Clone)]
pub struct BestSlot<T: Scalar> {
    pub epoch: usize,
    pub val_loss: f64,
    pub val_ssim: f64,
    pub model: ModelGraph<T>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub best_loss: Option<BestSlot<T>>,
    pub best_ssim: Option<BestSlot<T>>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub psnr: Psnr,
    pub ssim: f64,
}

/// Validation metrics use the refined output when the scope produces one,
/// else the first supervised target.
fn metric_target(out: &ModelOutput<impl Scalar>, spec: &CompositeSpec) -> Target {
    if out.refined.is_some() {
        Target::Refined
    } else {
        spec.terms[0].target
    }
}

/// Sum over batch items of the per-item mean squared error.
fn item_mse_sum<T: Scalar>(pred: &Tensor4<T>, truth: &Tensor4<T>) -> f64 {
    (0..pred.n())
        .map(|i| {
            let (a, b) = (pred.item(i), truth.item(i));
            a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / a.len() as f64
        })
        .sum()
}

/// Sum over batch items of SSIM; NaN for items smaller than the window.
fn item_ssim_sum<T: Scalar>(pred: &Tensor4<T>, truth: &Tensor4<T>, p: &SsimParams) -> Result<f64> {
    let (a, b) = (tensor_to_images(pred)?, tensor_to_images(truth)?);
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(&b) {
        sum += if x.height() >= p.window && x.width() >= p.window { ssim(x, y, p)? } else { f64::NAN };
    }
    Ok(sum)
}

/// Loss and quality over `samples` with running statistics and no caching.
pub fn validate<T: Scalar>(
    model: &mut ModelGraph<T>,
    samples: &[Sample<T>],
    spec: &CompositeSpec,
    scope: Scope,
    batch_size: usize,
    mut content: Option<&mut ContentExtractor<T>>,
) -> Result<Validation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let p = SsimParams::default();
    let (mut loss, mut mse_sum, mut ssim_sum) = (0.0, 0.0, 0.0);
    let refs: Vec<&Sample<T>> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk)?;
        let out = model.forward_scoped(&batch.input, Mode::Infer, scope)?;
        let v = composite_loss(&out, &batch.truths, spec, content.as_deref_mut())?;
        loss += v.total * chunk.len() as f64;
        let target = metric_target(&out, spec);
        let truth = batch.truths.get(target).ok_or_else(|| Error::MissingTarget(target.name().into()))?;
        let pred = out.get(target).expect("scoped output");
        mse_sum += item_mse_sum(pred, truth);
        ssim_sum += item_ssim_sum(pred, truth, &p)?;
    }
    let n = samples.len() as f64;
    Ok(Validation {
        loss: loss / n,
        psnr: psnr_from_mse(mse_sum / n, 1.0),
        ssim: ssim_sum / n,
    })
}

/// Settings for one run of the epoch loop.
#[derive(Debug, Clone)]
pub struct LoopSpec<'a> {
    pub tag: String,
    pub loss: &'a CompositeSpec,
    pub scope: Scope,
    pub max_epochs: usize,
}

fn train_loop<T: Scalar>(
    model: &mut ModelGraph<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    spec: &LoopSpec<'_>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    spec.loss.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    for t in spec.loss.targets() {
        let has = |s: &Sample<T>| match t {
            Target::Refined | Target::Dehazed => true,
            Target::Transmission => s.transmission.is_some(),
            Target::Airlight => s.airlight.is_some(),
        };
        if !train_set.iter().chain(val_set).all(has) {
            return Err(Error::MissingTarget(format!("samples lack a {} truth", t.name())));
        }
    }
    let mut content = spec.loss.uses(LossKind::Content).then(|| ContentExtractor::snapshot(model));
    let mut opt = Adam::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_ssim = f64::NEG_INFINITY;
    let mut outcome = TrainOutcome {
        best_loss: None,
        best_ssim: None,
        history: TrainHistory {
            tag: spec.tag.clone(),
            epochs: Vec::new(),
            epochs_run: 0,
            stop_reason: StopReason::MaxEpochs,
        },
    };
    let scope = spec.scope;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    model.zero_grad();
    model.clear_cache();

    for epoch in 1..=spec.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut mse_sum) = (0.0, 0.0);
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Sample<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = make_batch(&items)?;
            let out = model.forward_scoped(&batch.input, Mode::Train, scope)?;
            let v = match composite_loss(&out, &batch.truths, spec.loss, content.as_mut()) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let target = metric_target(&out, spec.loss);
            mse_sum += item_mse_sum(out.get(target).expect("output"), batch.truths.get(target).expect("truth"));
            loss_sum += v.total * chunk.len() as f64;
            model.backward_scoped(&v.grads, scope)?;
            let step = opt.step(model.tensors_mut(), |name| scope.trains(name));
            model.zero_grad();
            model.clear_cache();
            match step {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        model.zero_grad();
        model.clear_cache();
        if diverged {
            outcome.history.stop_reason = StopReason::Diverged;
            break;
        }
        let n = train_set.len() as f64;
        let val = validate(model, val_set, spec.loss, scope, cfg.batch_size, content.as_mut())?;
        if !val.loss.is_finite() {
            outcome.history.stop_reason = StopReason::Diverged;
            break;
        }
        let improved = stopper.update(val.loss);
        let ssim_improved = val.ssim > best_ssim;
        if improved {
            outcome.best_loss = Some(BestSlot {
                epoch,
                val_loss: val.loss,
                val_ssim: val.ssim,
                model: model.clone(),
            });
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(model, dir.join("best_loss.fdhz"))?;
            }
        }
        if ssim_improved {
            best_ssim = val.ssim;
            outcome.best_ssim = Some(BestSlot {
                epoch,
                val_loss: val.loss,
                val_ssim: val.ssim,
                model: model.clone(),
            });
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(model, dir.join("best_ssim.fdhz"))?;
            }
        }
        outcome.history.epochs.push(EpochRecord {
            tag: spec.tag.clone(),
            epoch,
            steps: opt.steps(),
            train_loss: loss_sum / n,
            train_psnr: psnr_from_mse(mse_sum / n, 1.0),
            val_loss: val.loss,
            val_psnr: val.psnr,
            val_ssim: val.ssim,
            saved_best_loss: improved,
            saved_best_ssim: ssim_improved,
        });
        outcome.history.epochs_run = epoch;
        if stopper.should_stop() {
            outcome.history.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    Ok(outcome)
}

/// Trains with `cfg.loss` over the whole graph. The model is left at its
/// final state; the best-validation-loss and best-validation-SSIM models are
/// returned (and written to `cfg.checkpoint_dir` when set).
pub fn train<T: Scalar>(model: &mut ModelGraph<T>, train_set: &[Sample<T>], val_set: &[Sample<T>], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_loop(
        model,
        train_set,
        val_set,
        cfg,
        &LoopSpec {
            tag: cfg.loss.to_string(),
            loss: &cfg.loss,
            scope: Scope::Full,
            max_epochs: cfg.max_epochs,
        },
    )
}

/// Continues training with `refine` and a fresh optimizer. The history tag
/// names the pair, e.g. `MSE → SSIM`.
pub fn fine_tune<T: Scalar>(
    model: &mut ModelGraph<T>,
    refine: &CompositeSpec,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_loop(
        model,
        train_set,
        val_set,
        cfg,
        &LoopSpec {
            tag: format!("{} → {}", cfg.loss, refine),
            loss: refine,
            scope: Scope::Full,
            max_epochs: cfg.refine_epochs.unwrap_or(cfg.max_epochs),
        },
    )
}

/// Loads `checkpoint` and fine-tunes it with `refine`.
pub fn fine_tune_checkpoint<T: Scalar>(
    checkpoint: impl AsRef<Path>,
    refine: &CompositeSpec,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<(ModelGraph<T>, TrainOutcome<T>)> {
    let mut model = load_checkpoint(checkpoint)?;
    let outcome = fine_tune(&mut model, refine, train_set, val_set, cfg)?;
    Ok((model, outcome))
}

/// Base training followed by `cfg.refine_loss` when configured.
pub fn train_with_refinement<T: Scalar>(
    model: &mut ModelGraph<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<Vec<TrainOutcome<T>>> {
    let mut runs = vec![train(model, train_set, val_set, cfg)?];
    if let Some(refine) = &cfg.refine_loss {
        if runs[0].history.stop_reason != StopReason::Diverged {
            runs.push(fine_tune(model, refine, train_set, val_set, cfg)?);
        }
    }
    Ok(runs)
}

/// Base and optional refinement loss for each row of the loss study.
pub const LOSS_STUDY: [(&str, Option<&str>); 7] = [
    ("l1", None),
    ("l1", Some("mse")),
    ("l1", Some("ssim")),
    ("mse", None),
    ("mse", Some("l1")),
    ("mse", Some("ssim")),
    ("mse", Some("content")),
];

/// The four stage-wise phases for DualFastNet.
pub const STAGES: [(&str, Scope, Target); 4] = [
    ("transmission", Scope::TransmissionOnly, Target::Transmission),
    ("airlight", Scope::AirlightOnly, Target::Airlight),
    ("refinement", Scope::RefinementOnly, Target::Refined),
    ("end-to-end", Scope::Full, Target::Refined),
];

/// Runs one entry of [`STAGES`]: MSE on that stage's target, training only
/// the tensors in its scope, with a fresh optimizer and early stopping.
pub fn train_stage<T: Scalar>(
    model: &mut ModelGraph<T>,
    stage: usize,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if !matches!(model, ModelGraph::Dual { .. }) {
        return Err(Error::InvalidArgument("stage-wise training needs a dual model".into()));
    }
    let (name, scope, target) = *STAGES
        .get(stage)
        .ok_or_else(|| Error::InvalidArgument(format!("stage {stage} out of range (0..{})", STAGES.len())))?;
    let loss = CompositeSpec::single(target, crate::losses::LossSpec::new(LossKind::Mse));
    train_loop(
        model,
        train_set,
        val_set,
        cfg,
        &LoopSpec {
            tag: format!("stage {name}"),
            loss: &loss,
            scope,
            max_epochs: cfg.max_epochs,
        },
    )
}

/// Stage-wise training: transmission branch, airlight branch, refinement
/// head, then everything. After each stage the model is restored to that
/// stage's best-validation-loss state.
pub fn train_stagewise<T: Scalar>(
    model: &mut ModelGraph<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
) -> Result<Vec<TrainOutcome<T>>> {
    let mut outcomes = Vec::with_capacity(STAGES.len());
    for stage in 0..STAGES.len() {
        let outcome = train_stage(model, stage, train_set, val_set, cfg)?;
        if let Some(best) = &outcome.best_loss {
            *model = best.model.clone();
        }
        let diverged = outcome.history.stop_reason == StopReason::Diverged;
        outcomes.push(outcome);
        if diverged {
            break;
        }
    }
    Ok(outcomes)
}

/// PSNR of the refined output against the clean image, using running
/// statistics.
pub fn sample_psnr<T: Scalar>(model: &mut ModelGraph<T>, sample: &Sample<T>) -> Result<Psnr> {
    let out = model.forward(&sample.hazy, Mode::Infer)?;
    let pred = tensor_to_images(out.refined.as_ref().expect("refined"))?;
    let truth = tensor_to_images(&sample.clean)?;
    psnr(&pred[0], &truth[0], 1.0)
}

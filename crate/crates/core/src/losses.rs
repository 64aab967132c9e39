//! Pixel losses (MSE, L1, SSIM), a frozen-encoder content loss, and weighted
//! composites over the named network outputs.
//!
//! The content loss compares stage-2 encoder features of a frozen copy of
//! the model's own encoder, snapshotted when the loss is built. It stands in
//! for a perceptual loss on an external pretrained network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ssim_plane_grad, SsimParams};
use crate::models::{Encoder, ModelGraph, ModelOutput, OutputGrads, Target};
use crate::nn::{Mode, Tensor4};
use crate::scalar::Scalar;

/// Encoder depth whose output the content loss compares.
pub const CONTENT_STAGE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    L1,
    Ssim,
    Content,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Mse => "MSE",
            LossKind::L1 => "L1",
            LossKind::Ssim => "SSIM",
            LossKind::Content => "Content Loss",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "l1" => Ok(LossKind::L1),
            "ssim" => Ok(LossKind::Ssim),
            "content" => Ok(LossKind::Content),
            other => Err(Error::Config(format!("unknown loss {other:?} (mse, l1, ssim, content)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub ssim: SsimParams,
}

fn one() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            weight: 1.0,
            ssim: SsimParams::default(),
        }
    }

    pub fn weighted(kind: LossKind, weight: f64) -> Self {
        Self { weight, ..Self::new(kind) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub target: Target,
    #[serde(flatten)]
    pub loss: LossSpec,
}

/// Weighted sum of per-target losses.
///
/// Shorthand names accepted by [`FromStr`]: `mse`, `l1`, `ssim`, `content`
/// (one term on the refined output), `mse_x1` (same as `mse`) and `mse_x4`
/// (unit MSE on refined, dehazed, transmission and airlight).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CompositeRepr")]
pub struct CompositeSpec {
    pub terms: Vec<LossTerm>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CompositeRepr {
    Name(String),
    Terms { terms: Vec<LossTerm> },
}

impl TryFrom<CompositeRepr> for CompositeSpec {
    type Error = Error;

    fn try_from(r: CompositeRepr) -> Result<Self> {
        match r {
            CompositeRepr::Name(s) => s.parse(),
            CompositeRepr::Terms { terms } => Ok(Self { terms }),
        }
    }
}

impl CompositeSpec {
    pub fn single(target: Target, loss: LossSpec) -> Self {
        Self {
            terms: vec![LossTerm { target, loss }],
        }
    }

    pub fn on_refined(kind: LossKind) -> Self {
        Self::single(Target::Refined, LossSpec::new(kind))
    }

    pub fn mse_x1() -> Self {
        Self::on_refined(LossKind::Mse)
    }

    pub fn mse_x4() -> Self {
        Self {
            terms: Target::ALL
                .iter()
                .map(|&target| LossTerm {
                    target,
                    loss: LossSpec::new(LossKind::Mse),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Config("loss has no terms".into()));
        }
        for t in &self.terms {
            if !(t.loss.weight.is_finite() && t.loss.weight >= 0.0) {
                return Err(Error::Config(format!("loss weight {} must be finite and >= 0", t.loss.weight)));
            }
            if t.loss.kind == LossKind::Ssim {
                t.loss.ssim.validate()?;
            }
            if t.loss.kind == LossKind::Content && t.target == Target::Transmission {
                return Err(Error::Config("content loss needs a 3-channel target".into()));
            }
        }
        Ok(())
    }

    pub fn uses(&self, kind: LossKind) -> bool {
        self.terms.iter().any(|t| t.loss.kind == kind)
    }

    pub fn targets(&self) -> Vec<Target> {
        let mut v: Vec<Target> = self.terms.iter().map(|t| t.target).collect();
        v.dedup();
        v
    }
}

impl FromStr for CompositeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse_x1" | "msex1" => Ok(Self::mse_x1()),
            "mse_x4" | "msex4" => Ok(Self::mse_x4()),
            other => Ok(Self::on_refined(other.parse()?)),
        }
    }
}

impl fmt::Display for CompositeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::mse_x4() {
            return f.write_str("MSE×4");
        }
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| {
                let w = if t.loss.weight == 1.0 { String::new() } else { format!("{}·", t.loss.weight) };
                if t.target == Target::Refined {
                    format!("{w}{}", t.loss.kind.label())
                } else {
                    format!("{w}{}[{}]", t.loss.kind.label(), t.target.name())
                }
            })
            .collect();
        f.write_str(&parts.join(" + "))
    }
}

/// Loss value and gradient with respect to the prediction.
pub struct LossValue<T: Scalar> {
    pub value: f64,
    pub grad: Tensor4<T>,
}

pub fn mse<T: Scalar>(pred: &Tensor4<T>, truth: &Tensor4<T>) -> Result<LossValue<T>> {
    pred.same_dims(truth, "mse truth")?;
    let n = pred.len() as f64;
    let mut s = 0.0;
    let k = T::lit(2.0 / n);
    let grad = pred.zip_map(truth, |p, t| {
        let d = p - t;
        k * d
    })?;
    for (p, t) in pred.data().iter().zip(truth.data()) {
        s += (p.as_f64() - t.as_f64()).powi(2);
    }
    Ok(LossValue { value: s / n, grad })
}

/// Mean absolute error; the subgradient at ties is 0.
pub fn l1<T: Scalar>(pred: &Tensor4<T>, truth: &Tensor4<T>) -> Result<LossValue<T>> {
    pred.same_dims(truth, "l1 truth")?;
    let n = pred.len() as f64;
    let k = T::lit(1.0 / n);
    let grad = pred.zip_map(truth, |p, t| {
        if p > t {
            k
        } else if p < t {
            -k
        } else {
            T::zero()
        }
    })?;
    let s: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p.as_f64() - t.as_f64()).abs()).sum();
    Ok(LossValue { value: s / n, grad })
}

/// `1 − mean SSIM` over batch items, each on its channel-mean plane.
pub fn ssim_loss<T: Scalar>(pred: &Tensor4<T>, truth: &Tensor4<T>, p: &SsimParams) -> Result<LossValue<T>> {
    pred.same_dims(truth, "ssim truth")?;
    let [n, c, h, w] = pred.dims();
    let plane = h * w;
    let gray = |t: &Tensor4<T>, i: usize| -> Vec<f64> {
        let item = t.item(i);
        (0..plane)
            .map(|k| (0..c).map(|ch| item[ch * plane + k].as_f64()).sum::<f64>() / c as f64)
            .collect()
    };
    let mut grad = Tensor4::zeros(pred.dims());
    let mut total = 0.0;
    for i in 0..n {
        let (s, g) = ssim_plane_grad(&gray(pred, i), &gray(truth, i), h, w, p)?;
        total += s;
        let k = -1.0 / (n * c) as f64;
        let dst = grad.item_mut(i);
        for ch in 0..c {
            for (d, gv) in dst[ch * plane..(ch + 1) * plane].iter_mut().zip(&g) {
                *d = T::lit(k * gv);
            }
        }
    }
    Ok(LossValue {
        value: 1.0 - total / n as f64,
        grad,
    })
}

/// Frozen encoder truncated after [`CONTENT_STAGE`] stages, evaluated with
/// running statistics.
#[derive(Debug, Clone)]
pub struct ContentExtractor<T: Scalar> {
    encoder: Encoder<T>,
}

impl<T: Scalar> ContentExtractor<T> {
    pub fn snapshot(model: &ModelGraph<T>) -> Self {
        Self::from_encoder(model.encoder().clone())
    }

    pub fn from_encoder(mut encoder: Encoder<T>) -> Self {
        encoder.stages.truncate(CONTENT_STAGE);
        encoder.clear_cache();
        Self { encoder }
    }

    pub fn features(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.encoder.forward_features(x, Mode::Infer, CONTENT_STAGE)?.pop().expect("stage output"))
    }

    /// `mean((φ(pred) − φ(truth))²)` and its gradient with respect to `pred`.
    pub fn loss(&mut self, pred: &Tensor4<T>, truth: &Tensor4<T>) -> Result<LossValue<T>> {
        pred.same_dims(truth, "content truth")?;
        let ft = self.features(truth)?;
        let fp = self.encoder.forward_features(pred, Mode::Eval, CONTENT_STAGE)?.pop().expect("stage output");
        let m = mse(&fp, &ft)?;
        let mut grads = vec![None; CONTENT_STAGE];
        grads[CONTENT_STAGE - 1] = Some(m.grad);
        let grad = self.encoder.backward_features(grads)?;
        let mut params = Vec::new();
        self.encoder.tensors_mut("", &mut params);
        params.into_iter().for_each(|t| t.tensor.zero_grad());
        self.encoder.clear_cache();
        Ok(LossValue { value: m.value, grad })
    }
}

/// One loss term on a single prediction.
pub fn loss_forward_backward<T: Scalar>(
    pred: &Tensor4<T>,
    truth: &Tensor4<T>,
    spec: &LossSpec,
    content: Option<&mut ContentExtractor<T>>,
) -> Result<LossValue<T>> {
    let mut v = match spec.kind {
        LossKind::Mse => mse(pred, truth)?,
        LossKind::L1 => l1(pred, truth)?,
        LossKind::Ssim => ssim_loss(pred, truth, &spec.ssim)?,
        LossKind::Content => content
            .ok_or_else(|| Error::InvalidArgument("content loss needs a feature extractor".into()))?
            .loss(pred, truth)?,
    };
    v.value *= spec.weight;
    v.grad.scale(T::lit(spec.weight));
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct CompositeValue<T: Scalar> {
    pub total: f64,
    /// Weighted value of each term, in spec order.
    pub terms: Vec<(Target, LossKind, f64)>,
    pub grads: OutputGrads<T>,
}

/// Weighted sum over the spec's terms. `truths` holds the ground truth for
/// each supervised output (the clean image for refined and dehazed).
pub fn composite_loss<T: Scalar>(
    outputs: &ModelOutput<T>,
    truths: &ModelOutput<T>,
    spec: &CompositeSpec,
    mut content: Option<&mut ContentExtractor<T>>,
) -> Result<CompositeValue<T>> {
    spec.validate()?;
    let mut grads = OutputGrads::default();
    let mut terms = Vec::with_capacity(spec.terms.len());
    let mut total = 0.0;
    for term in &spec.terms {
        let name = term.target.name();
        let pred = outputs
            .get(term.target)
            .ok_or_else(|| Error::MissingTarget(format!("output {name}")))?;
        let truth = truths
            .get(term.target)
            .ok_or_else(|| Error::MissingTarget(format!("truth {name}")))?;
        let v = loss_forward_backward(pred, truth, &term.loss, content.as_deref_mut())?;
        if !v.value.is_finite() {
            return Err(Error::NonFinite(format!("{} loss on {name}", term.loss.kind.label())));
        }
        total += v.value;
        terms.push((term.target, term.loss.kind, v.value));
        match grads.slot(term.target) {
            Some(g) => g.add_assign(&v.grad)?,
            slot => *slot = Some(v.grad),
        }
    }
    Ok(CompositeValue { total, terms, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::FastNetConfig;
    use crate::nn::gradcheck::{check_input_gradient, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor4<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor4::from_vec(dims, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
    }

    fn outputs(r: f64, d: f64, t: f64, a: f64) -> ModelOutput<f64> {
        ModelOutput {
            refined: Some(Tensor4::filled([1, 3, 4, 4], r)),
            dehazed: Some(Tensor4::filled([1, 3, 4, 4], d)),
            transmission: Some(Tensor4::filled([1, 1, 4, 4], t)),
            airlight: Some(Tensor4::filled([1, 3, 4, 4], a)),
        }
    }

    #[test]
    fn identical_inputs_give_zero() {
        let x = random([1, 3, 16, 16], 0, 0.0, 1.0);
        for kind in [LossKind::Mse, LossKind::L1, LossKind::Ssim] {
            let v = loss_forward_backward(&x, &x, &LossSpec::new(kind), None).unwrap();
            assert_eq!(v.value, 0.0, "{kind:?}");
            assert!(v.grad.data().iter().all(|&g| g.abs() < 1e-15), "{kind:?}");
        }
        let mut ext = ContentExtractor::snapshot(&ModelGraph::<f64>::fastnet(&FastNetConfig::toy(), 0).unwrap());
        let v = ext.loss(&x, &x).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_offset_values() {
        let p = Tensor4::filled([1, 3, 4, 4], 0.6f64);
        let t = Tensor4::filled([1, 3, 4, 4], 0.5f64);
        assert!((mse(&p, &t).unwrap().value - 0.01).abs() < 1e-12);
        assert!((l1(&p, &t).unwrap().value - 0.1).abs() < 1e-12);
        assert!(mse(&p, &Tensor4::zeros([1, 3, 4, 5])).is_err());
    }

    #[test]
    fn symmetric_values() {
        let a = random([1, 3, 16, 16], 1, 0.0, 1.0);
        let b = random([1, 3, 16, 16], 2, 0.0, 1.0);
        assert_eq!(mse(&a, &b).unwrap().value, mse(&b, &a).unwrap().value);
        assert_eq!(l1(&a, &b).unwrap().value, l1(&b, &a).unwrap().value);
        let p = SsimParams::default();
        assert!((ssim_loss(&a, &b, &p).unwrap().value - ssim_loss(&b, &a, &p).unwrap().value).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_differences() {
        let opts = GradCheckOptions::exhaustive(1e-6, 1e-5);
        let truth = random([1, 3, 32, 32], 3, 0.1, 0.9);
        let pred = random([1, 3, 32, 32], 4, 0.1, 0.9);
        // keep |pred - truth| away from the L1 tie
        let pred_l1 = pred.zip_map(&truth, |p, t| if (p - t).abs() < 1e-3 { t + 0.01 } else { p }).unwrap();
        let mut ext = ContentExtractor::snapshot(&{
            let mut g = ModelGraph::<f64>::fastnet(&FastNetConfig::toy(), 1).unwrap();
            g.randomize_affine(5);
            g
        });
        for kind in [LossKind::Mse, LossKind::L1, LossKind::Ssim, LossKind::Content] {
            let x = if kind == LossKind::L1 { &pred_l1 } else { &pred };
            let spec = LossSpec::new(kind);
            let g = loss_forward_backward(x, &truth, &spec, Some(&mut ext)).unwrap().grad;
            let e = check_input_gradient(
                kind.label(),
                |p| Ok(loss_forward_backward(p, &truth, &spec, Some(&mut ext.clone()))?.value),
                x,
                &g,
                &opts,
            )
            .unwrap();
            assert!(e.max_rel_err < 1e-5, "{kind:?}: {e:?}");
        }
    }

    #[test]
    fn batched_ssim_gradient() {
        let truth = random([2, 1, 12, 12], 5, 0.1, 0.9);
        let pred = random([2, 1, 12, 12], 6, 0.1, 0.9);
        let p = SsimParams::default();
        let g = ssim_loss(&pred, &truth, &p).unwrap().grad;
        let e = check_input_gradient("ssim", |x| Ok(ssim_loss(x, &truth, &p)?.value), &pred, &g, &GradCheckOptions::exhaustive(1e-6, 1e-6))
            .unwrap();
        assert!(e.max_rel_err < 1e-6, "{e:?}");
    }

    #[test]
    fn composite_presets() {
        let truth = outputs(0.5, 0.5, 0.5, 0.7);
        let perfect = outputs(0.5, 0.3, 0.2, 0.1);
        assert_eq!(composite_loss(&perfect, &truth, &CompositeSpec::mse_x1(), None).unwrap().total, 0.0);

        let off_t = outputs(0.5, 0.5, 0.6, 0.7);
        let v = composite_loss(&off_t, &truth, &CompositeSpec::mse_x4(), None).unwrap();
        assert!((v.total - 0.01).abs() < 1e-12);
        assert_eq!(v.terms.len(), 4);

        let out = outputs(0.1, 0.2, 0.3, 0.4);
        let v = composite_loss(&out, &truth, &CompositeSpec::mse_x4(), None).unwrap();
        let sum: f64 = Target::ALL
            .iter()
            .map(|&t| mse(out.get(t).unwrap(), truth.get(t).unwrap()).unwrap().value)
            .sum();
        assert!((v.total - sum).abs() < 1e-9);
    }

    #[test]
    fn composite_weight_linearity() {
        let truth = outputs(0.5, 0.5, 0.5, 0.7);
        let out = outputs(0.1, 0.2, 0.3, 0.4);
        let mut spec = CompositeSpec::mse_x4();
        let base = composite_loss(&out, &truth, &spec, None).unwrap();
        spec.terms[2].loss.weight = 2.0;
        let doubled = composite_loss(&out, &truth, &spec, None).unwrap();
        assert!((doubled.terms[2].2 - 2.0 * base.terms[2].2).abs() < 1e-15);
        let (g1, g2) = (base.grads.transmission.unwrap(), doubled.grads.transmission.unwrap());
        assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| (2.0 * a - b).abs() < 1e-15));
    }

    #[test]
    fn missing_target_is_reported() {
        let truth = outputs(0.5, 0.5, 0.5, 0.7);
        let fast = ModelOutput {
            refined: Some(Tensor4::filled([1, 3, 4, 4], 0.5)),
            ..Default::default()
        };
        assert!(matches!(
            composite_loss(&fast, &truth, &CompositeSpec::mse_x4(), None),
            Err(Error::MissingTarget(_))
        ));
    }

    #[test]
    fn shorthand_parsing_and_labels() {
        assert_eq!("mse_x4".parse::<CompositeSpec>().unwrap(), CompositeSpec::mse_x4());
        assert_eq!("L1".parse::<CompositeSpec>().unwrap(), CompositeSpec::on_refined(LossKind::L1));
        assert!("perceptual".parse::<CompositeSpec>().is_err());
        assert_eq!(CompositeSpec::mse_x4().to_string(), "MSE×4");
        assert_eq!(CompositeSpec::on_refined(LossKind::Content).to_string(), "Content Loss");
        let spec = CompositeSpec::single(Target::Transmission, LossSpec::weighted(LossKind::Mse, 0.5));
        assert_eq!(spec.to_string(), "0.5·MSE[transmission]");
        let toml_spec: CompositeSpec = toml::from_str("[[terms]]\ntarget = \"airlight\"\nkind = \"l1\"\n").unwrap();
        assert_eq!(toml_spec.terms[0].loss.weight, 1.0);
        #[derive(serde::Deserialize)]
        struct Wrap {
            loss: CompositeSpec,
        }
        let w: Wrap = toml::from_str("loss = \"mse_x4\"").unwrap();
        assert_eq!(w.loss, CompositeSpec::mse_x4());
    }
}

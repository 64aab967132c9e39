//! FastNet and DualFastNet.
//!
//! FastNet is one encoder-decoder trunk feeding pyramid refinement.
//! DualFastNet runs two identical trunks, one ending in a 1-channel sigmoid
//! transmission map and one in a 3-channel sigmoid airlight map, inverts the
//! scattering model inside the graph, and refines `concat(Ĵ, I)`.

mod blocks;

pub use blocks::{decoder_block, Encoder, EncoderDecoder, Refinement, ResidualBlock, Stage};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gradcheck::{random_weights, weighted_sum};
use crate::nn::{concat, grad_check, GradCheckOptions, GradCheckReport, Objective, join, split_channels, Conv2d, Layer, Mode, Module, NamedTensor, NamedTensorMut, Sequential, Sigmoid, Tensor4};
use crate::scalar::Scalar;

/// Spatial size multiple required by five stride-2 reductions.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fast,
    Dual,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            ModelKind::Fast => 1,
            ModelKind::Dual => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Fast),
            2 => Some(ModelKind::Dual),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastNetConfig {
    pub encoder_kind: EncoderKind,
    pub blocks_per_stage: [usize; 4],
    pub base_width: usize,
    pub feature_channels: usize,
    pub refinement_scales: Vec<usize>,
    /// Transmission floor inside DualFastNet image formation.
    pub t_min: f64,
}

/// Reference parameter counts for the full-scale presets.
pub const REFERENCE_SMALL: usize = 11_554_167;
pub const REFERENCE_BIG: usize = 28_782_647;
pub const REFERENCE_DUAL: usize = 23_072_725;
/// Refinement budget implied by the reference counts: `dual − 2·(small − R) = R`.
pub const REFERENCE_REFINEMENT_BUDGET: usize = 35_609;

impl Default for FastNetConfig {
    fn default() -> Self {
        Self::small()
    }
}

impl FastNetConfig {
    pub fn small() -> Self {
        Self {
            encoder_kind: EncoderKind::Basic,
            blocks_per_stage: [2, 2, 2, 2],
            base_width: 64,
            feature_channels: 32,
            refinement_scales: vec![1, 2, 4, 8],
            t_min: 0.05,
        }
    }

    pub fn big() -> Self {
        Self {
            encoder_kind: EncoderKind::Bottleneck,
            blocks_per_stage: [3, 4, 6, 3],
            ..Self::small()
        }
    }

    /// Desk-scale basic encoder, one block per stage, base width 8.
    pub fn toy() -> Self {
        Self {
            blocks_per_stage: [1, 1, 1, 1],
            base_width: 8,
            ..Self::small()
        }
    }

    /// Named preset: `small`, `big`, `dual` (same trunk as small) or `toy`.
    pub fn preset(name: &str) -> Result<(ModelKind, Self)> {
        match name {
            "small" => Ok((ModelKind::Fast, Self::small())),
            "big" => Ok((ModelKind::Fast, Self::big())),
            "dual" => Ok((ModelKind::Dual, Self::small())),
            "toy" => Ok((ModelKind::Fast, Self::toy())),
            "toy-dual" => Ok((ModelKind::Dual, Self::toy())),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected small, big, dual, toy, toy-dual)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config(format!("every stage needs >= 1 block: {:?}", self.blocks_per_stage)));
        }
        if self.base_width < 4 {
            return Err(Error::Config(format!("base_width must be >= 4, got {}", self.base_width)));
        }
        if self.feature_channels < 4 {
            return Err(Error::Config(format!("feature_channels must be >= 4, got {}", self.feature_channels)));
        }
        if self.refinement_scales.is_empty() || self.refinement_scales.contains(&0) {
            return Err(Error::Config(format!("bad refinement scales {:?}", self.refinement_scales)));
        }
        if !(self.t_min > 0.0 && self.t_min <= 1.0) {
            return Err(Error::Config(format!("t_min must be in (0, 1], got {}", self.t_min)));
        }
        Ok(())
    }

    /// Output channels of the four encoder stages.
    pub fn stage_channels(&self) -> [usize; 4] {
        let w = self.base_width;
        match self.encoder_kind {
            EncoderKind::Basic => [w, 2 * w, 4 * w, 8 * w],
            EncoderKind::Bottleneck => [4 * w, 8 * w, 16 * w, 32 * w],
        }
    }

    pub fn branch_channels(&self) -> usize {
        (self.feature_channels / 4).max(1)
    }
}

/// Learnable parameter count of a named-tensor listing.
fn learnable(tensors: &[NamedTensor<'_, impl Scalar>]) -> usize {
    tensors.iter().filter(|t| t.learnable).map(|t| t.tensor.len()).sum()
}

#[derive(Debug, Clone)]
pub struct FastNet<T: Scalar> {
    pub trunk: EncoderDecoder<T>,
    pub refine: Refinement<T>,
}

impl<T: Scalar> FastNet<T> {
    pub fn new(cfg: &FastNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            trunk: EncoderDecoder::new(&mut rng, cfg),
            refine: Refinement::new(&mut rng, cfg.feature_channels, cfg.branch_channels(), &cfg.refinement_scales),
        })
    }
}

impl<T: Scalar> Module<T> for FastNet<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let f = self.trunk.forward(x, mode)?;
        self.refine.forward(&f, mode)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.refine.backward(grad)?;
        self.trunk.backward(&g)
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.trunk.tensors(&join(prefix, "trunk"), out);
        self.refine.tensors(&join(prefix, "refine"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        self.trunk.tensors_mut(&join(prefix, "trunk"), out);
        self.refine.tensors_mut(&join(prefix, "refine"), out);
    }

    fn clear_cache(&mut self) {
        self.trunk.clear_cache();
        self.refine.clear_cache();
    }
}

/// Which part of a DualFastNet a forward/backward pass covers. Parts outside
/// the scope are either skipped or run cache-free in inference mode, so
/// their tensors (parameters and running statistics) do not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    TransmissionOnly,
    AirlightOnly,
    RefinementOnly,
}

impl Scope {
    /// Name prefixes of the tensors a scope trains.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Scope::Full => &[""],
            Scope::TransmissionOnly => &["trans.", "trans_head."],
            Scope::AirlightOnly => &["air.", "air_head."],
            Scope::RefinementOnly => &["refine."],
        }
    }

    pub fn trains(self, name: &str) -> bool {
        self.trainable_prefixes().iter().any(|p| name.starts_with(p))
    }
}

#[derive(Debug, Clone)]
struct FormationCache<T: Scalar> {
    input: Tensor4<T>,
    t: Tensor4<T>,
    a: Tensor4<T>,
    raw: Tensor4<T>,
}

/// `Ĵ = clamp((I − Â·(1 − t'))/t', 0, 1)` with `t' = max(t̂, t_min)`; `t̂`
/// has one channel broadcast over the three of `I` and `Â`. Returns the
/// clamped and the raw estimate.
pub fn image_formation<T: Scalar>(i: &Tensor4<T>, t: &Tensor4<T>, a: &Tensor4<T>, t_min: T) -> Result<(Tensor4<T>, Tensor4<T>)> {
    i.same_dims(a, "airlight estimate")?;
    let [n, c, h, w] = i.dims();
    if t.dims() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch(format!("transmission {:?} for image {:?}", t.dims(), i.dims())));
    }
    let plane = h * w;
    let mut raw = Tensor4::zeros(i.dims());
    for b in 0..n {
        let tp = t.item(b);
        let (ii, ai) = (i.item(b), a.item(b));
        let r = raw.item_mut(b);
        for ch in 0..c {
            for p in 0..plane {
                let k = ch * plane + p;
                let tv = tp[p].max(t_min);
                r[k] = (ii[k] - ai[k] * (T::one() - tv)) / tv;
            }
        }
    }
    let clamped = raw.map(|v| v.max(T::zero()).min(T::one()));
    Ok((clamped, raw))
}

/// Gradients of [`image_formation`] with respect to `(I, t̂, Â)`.
fn image_formation_backward<T: Scalar>(cache: &FormationCache<T>, grad: &Tensor4<T>, t_min: T) -> Result<[Tensor4<T>; 3]> {
    cache.input.same_dims(grad, "formation upstream grad")?;
    let [n, c, h, w] = grad.dims();
    let plane = h * w;
    let mut gi = Tensor4::zeros(grad.dims());
    let mut ga = Tensor4::zeros(grad.dims());
    let mut gt = Tensor4::zeros([n, 1, h, w]);
    for b in 0..n {
        let (ii, ai, rw, gg) = (cache.input.item(b), cache.a.item(b), cache.raw.item(b), grad.item(b));
        let tp = cache.t.item(b);
        for p in 0..plane {
            let active_t = tp[p] > t_min;
            let tv = tp[p].max(t_min);
            let mut acc = T::zero();
            for ch in 0..c {
                let k = ch * plane + p;
                if !(rw[k] > T::zero() && rw[k] < T::one()) {
                    continue;
                }
                let g = gg[k];
                gi.item_mut(b)[k] = g / tv;
                ga.item_mut(b)[k] = -g * (T::one() - tv) / tv;
                if active_t {
                    acc += -g * (ii[k] - ai[k]) / (tv * tv);
                }
            }
            gt.item_mut(b)[p] = acc;
        }
    }
    Ok([gi, gt, ga])
}

#[derive(Debug, Clone)]
pub struct DualFastNet<T: Scalar> {
    pub trans: EncoderDecoder<T>,
    pub trans_head: Sequential<T>,
    pub air: EncoderDecoder<T>,
    pub air_head: Sequential<T>,
    pub refine: Refinement<T>,
    pub t_min: T,
    formation: Option<FormationCache<T>>,
}

impl<T: Scalar> DualFastNet<T> {
    pub fn new(cfg: &FastNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.feature_channels;
        let trans = EncoderDecoder::new(&mut rng, cfg);
        let trans_head = Sequential::new(vec![
            Layer::Conv(Conv2d::new(&mut rng, f, 1, 3, 1, 1, true)),
            Layer::Sigmoid(Sigmoid::new()),
        ]);
        let air = EncoderDecoder::new(&mut rng, cfg);
        let air_head = Sequential::new(vec![
            Layer::Conv(Conv2d::new(&mut rng, f, 3, 3, 1, 1, true)),
            Layer::Sigmoid(Sigmoid::new()),
        ]);
        let refine = Refinement::new(&mut rng, 6, cfg.branch_channels(), &cfg.refinement_scales);
        Ok(Self {
            trans,
            trans_head,
            air,
            air_head,
            refine,
            t_min: T::lit(cfg.t_min),
            formation: None,
        })
    }

    /// Learnable parameters of one encoder-decoder trunk.
    pub fn trunk_params(&self) -> usize {
        self.trans.param_count()
    }

    /// Both output projections plus the shared refinement head.
    pub fn head_params(&self) -> usize {
        self.trans_head.param_count() + self.air_head.param_count() + self.refine.param_count()
    }

    fn forward_scoped(&mut self, x: &Tensor4<T>, mode: Mode, scope: Scope) -> Result<ModelOutput<T>> {
        let branch_mode = |active: bool| if active { mode } else { Mode::Infer };
        let mut out = ModelOutput::default();
        let run_t = scope != Scope::AirlightOnly;
        let run_a = scope != Scope::TransmissionOnly;
        if run_t {
            let m = branch_mode(matches!(scope, Scope::Full | Scope::TransmissionOnly));
            let f = self.trans.forward(x, m)?;
            out.transmission = Some(self.trans_head.forward(&f, m)?);
        }
        if run_a {
            let m = branch_mode(matches!(scope, Scope::Full | Scope::AirlightOnly));
            let f = self.air.forward(x, m)?;
            out.airlight = Some(self.air_head.forward(&f, m)?);
        }
        if matches!(scope, Scope::Full | Scope::RefinementOnly) {
            let (t, a) = (out.transmission.as_ref().expect("t"), out.airlight.as_ref().expect("A"));
            let (j, raw) = image_formation(x, t, a, self.t_min)?;
            self.formation = mode.caches().then(|| FormationCache {
                input: x.clone(),
                t: t.clone(),
                a: a.clone(),
                raw,
            });
            out.refined = Some(self.refine.forward(&concat(&[&j, x])?, mode)?);
            out.dehazed = Some(j);
        }
        Ok(out)
    }

    fn backward_scoped(&mut self, grads: &OutputGrads<T>, scope: Scope) -> Result<Option<Tensor4<T>>> {
        match scope {
            Scope::TransmissionOnly => {
                let g = grads.transmission.as_ref().ok_or(Error::MissingTarget("transmission".into()))?;
                let g = self.trans_head.backward(g)?;
                self.trans.backward(&g)?;
                Ok(None)
            }
            Scope::AirlightOnly => {
                let g = grads.airlight.as_ref().ok_or(Error::MissingTarget("airlight".into()))?;
                let g = self.air_head.backward(g)?;
                self.air.backward(&g)?;
                Ok(None)
            }
            Scope::RefinementOnly => {
                let g = grads.refined.as_ref().ok_or(Error::MissingTarget("refined".into()))?;
                self.refine.backward(g)?;
                Ok(None)
            }
            Scope::Full => self.backward_full(grads).map(Some),
        }
    }

    fn backward_full(&mut self, grads: &OutputGrads<T>) -> Result<Tensor4<T>> {
        let cache = self.formation.take().ok_or(Error::NoForwardCache("image formation"))?;
        let dims = cache.input.dims();
        let mut g_j = Tensor4::zeros(dims);
        let mut g_x = Tensor4::zeros(dims);
        if let Some(g) = &grads.refined {
            let gc = self.refine.backward(g)?;
            let mut parts = split_channels(&gc, &[3, 3])?.into_iter();
            g_j = parts.next().expect("J part");
            g_x = parts.next().expect("I part");
        }
        if let Some(g) = &grads.dehazed {
            g_j.add_assign(g)?;
        }
        let [gi, mut gt, mut ga] = image_formation_backward(&cache, &g_j, self.t_min)?;
        g_x.add_assign(&gi)?;
        if let Some(g) = &grads.transmission {
            gt.add_assign(g)?;
        }
        if let Some(g) = &grads.airlight {
            ga.add_assign(g)?;
        }
        let g = self.trans_head.backward(&gt)?;
        g_x.add_assign(&self.trans.backward(&g)?)?;
        let g = self.air_head.backward(&ga)?;
        g_x.add_assign(&self.air.backward(&g)?)?;
        self.formation = Some(cache);
        Ok(g_x)
    }

    pub fn tensors<'a>(&'a self, out: &mut Vec<NamedTensor<'a, T>>) {
        self.trans.tensors("trans", out);
        self.trans_head.tensors("trans_head", out);
        self.air.tensors("air", out);
        self.air_head.tensors("air_head", out);
        self.refine.tensors("refine", out);
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<NamedTensorMut<'a, T>>) {
        self.trans.tensors_mut("trans", out);
        self.trans_head.tensors_mut("trans_head", out);
        self.air.tensors_mut("air", out);
        self.air_head.tensors_mut("air_head", out);
        self.refine.tensors_mut("refine", out);
    }

    fn clear_cache(&mut self) {
        self.trans.clear_cache();
        self.trans_head.clear_cache();
        self.air.clear_cache();
        self.air_head.clear_cache();
        self.refine.clear_cache();
        self.formation = None;
    }
}

/// Network outputs. FastNet fills only `refined`; DualFastNet fills the
/// fields its scope computes.
#[derive(Debug, Clone, Default)]
pub struct ModelOutput<T: Scalar> {
    pub refined: Option<Tensor4<T>>,
    pub dehazed: Option<Tensor4<T>>,
    pub transmission: Option<Tensor4<T>>,
    pub airlight: Option<Tensor4<T>>,
}

impl<T: Scalar> ModelOutput<T> {
    pub fn get(&self, target: Target) -> Option<&Tensor4<T>> {
        match target {
            Target::Refined => self.refined.as_ref(),
            Target::Dehazed => self.dehazed.as_ref(),
            Target::Transmission => self.transmission.as_ref(),
            Target::Airlight => self.airlight.as_ref(),
        }
    }

    pub fn refined(&self) -> Result<&Tensor4<T>> {
        self.refined.as_ref().ok_or(Error::MissingTarget("refined".into()))
    }
}

/// Upstream gradients on [`ModelOutput`] fields; absent means zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<T: Scalar> {
    pub refined: Option<Tensor4<T>>,
    pub dehazed: Option<Tensor4<T>>,
    pub transmission: Option<Tensor4<T>>,
    pub airlight: Option<Tensor4<T>>,
}

impl<T: Scalar> OutputGrads<T> {
    pub fn slot(&mut self, target: Target) -> &mut Option<Tensor4<T>> {
        match target {
            Target::Refined => &mut self.refined,
            Target::Dehazed => &mut self.dehazed,
            Target::Transmission => &mut self.transmission,
            Target::Airlight => &mut self.airlight,
        }
    }
}

/// Named network output a loss can supervise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Refined,
    Dehazed,
    Transmission,
    Airlight,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Refined, Target::Dehazed, Target::Transmission, Target::Airlight];

    pub fn name(self) -> &'static str {
        match self {
            Target::Refined => "refined",
            Target::Dehazed => "dehazed",
            Target::Transmission => "transmission",
            Target::Airlight => "airlight",
        }
    }
}

/// A built FastNet or DualFastNet with its configuration.
#[derive(Debug, Clone)]
pub enum ModelGraph<T: Scalar = f32> {
    Fast { cfg: FastNetConfig, net: Box<FastNet<T>> },
    Dual { cfg: FastNetConfig, net: Box<DualFastNet<T>> },
}

impl<T: Scalar> ModelGraph<T> {
    pub fn build(kind: ModelKind, cfg: &FastNetConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Fast => ModelGraph::Fast {
                cfg: cfg.clone(),
                net: Box::new(FastNet::new(cfg, seed)?),
            },
            ModelKind::Dual => ModelGraph::Dual {
                cfg: cfg.clone(),
                net: Box::new(DualFastNet::new(cfg, seed)?),
            },
        })
    }

    pub fn fastnet(cfg: &FastNetConfig, seed: u64) -> Result<Self> {
        Self::build(ModelKind::Fast, cfg, seed)
    }

    pub fn dualfastnet(cfg: &FastNetConfig, seed: u64) -> Result<Self> {
        Self::build(ModelKind::Dual, cfg, seed)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelGraph::Fast { .. } => ModelKind::Fast,
            ModelGraph::Dual { .. } => ModelKind::Dual,
        }
    }

    pub fn config(&self) -> &FastNetConfig {
        match self {
            ModelGraph::Fast { cfg, .. } | ModelGraph::Dual { cfg, .. } => cfg,
        }
    }

    /// Forward over the whole graph. Input H and W must be multiples of 32.
    pub fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<ModelOutput<T>> {
        self.forward_scoped(x, mode, Scope::Full)
    }

    pub fn forward_scoped(&mut self, x: &Tensor4<T>, mode: Mode, scope: Scope) -> Result<ModelOutput<T>> {
        check_divisible(x)?;
        if x.c() != 3 {
            return Err(Error::ShapeMismatch(format!("model input needs 3 channels, got {}", x.c())));
        }
        match self {
            ModelGraph::Fast { net, .. } => {
                if scope != Scope::Full {
                    return Err(Error::InvalidArgument(format!("scope {scope:?} needs a dual model")));
                }
                Ok(ModelOutput {
                    refined: Some(net.forward(x, mode)?),
                    ..Default::default()
                })
            }
            ModelGraph::Dual { net, .. } => net.forward_scoped(x, mode, scope),
        }
    }

    /// Backward after a caching full-scope forward; returns the input gradient.
    pub fn backward(&mut self, grads: &OutputGrads<T>) -> Result<Tensor4<T>> {
        self.backward_scoped(grads, Scope::Full)?
            .ok_or_else(|| Error::InvalidArgument("full backward produced no input gradient".into()))
    }

    /// Backward limited to `scope`; partial scopes return no input gradient.
    pub fn backward_scoped(&mut self, grads: &OutputGrads<T>, scope: Scope) -> Result<Option<Tensor4<T>>> {
        match self {
            ModelGraph::Fast { net, .. } => {
                let g = grads.refined.as_ref().ok_or(Error::MissingTarget("refined".into()))?;
                net.backward(g).map(Some)
            }
            ModelGraph::Dual { net, .. } => net.backward_scoped(grads, scope),
        }
    }

    /// Eval-mode, cache-free forward on any size: reflect-pads to a multiple
    /// of 32 and crops every output back.
    pub fn infer_padded(&mut self, x: &Tensor4<T>) -> Result<ModelOutput<T>> {
        let (h, w) = (x.h(), x.w());
        let (ph, pw) = padded_dims(h, w);
        let padded = reflect_pad(x, ph, pw);
        let out = self.forward(&padded, Mode::Infer)?;
        let crop = |t: Option<Tensor4<T>>| t.map(|t| crop_top_left(&t, h, w));
        Ok(ModelOutput {
            refined: crop(out.refined),
            dehazed: crop(out.dehazed),
            transmission: crop(out.transmission),
            airlight: crop(out.airlight),
        })
    }

    pub fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut v = Vec::new();
        match self {
            ModelGraph::Fast { net, .. } => net.tensors("", &mut v),
            ModelGraph::Dual { net, .. } => net.tensors(&mut v),
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        let mut v = Vec::new();
        match self {
            ModelGraph::Fast { net, .. } => net.tensors_mut("", &mut v),
            ModelGraph::Dual { net, .. } => net.tensors_mut(&mut v),
        }
        v
    }

    pub fn param_count(&self) -> usize {
        learnable(&self.tensors())
    }

    /// Learnable parameters per top-level module, in graph order.
    pub fn param_groups(&self) -> Vec<(String, usize)> {
        let tensors = self.tensors();
        let mut groups: Vec<(String, usize)> = Vec::new();
        for t in tensors.iter().filter(|t| t.learnable) {
            let mut parts = t.name.split('.');
            let top = parts.next().unwrap_or_default();
            let key = match (top, parts.next()) {
                ("trunk" | "trans" | "air", Some(sub)) => format!("{top}.{}", sub),
                _ => top.to_string(),
            };
            match groups.last_mut() {
                Some((k, n)) if *k == key => *n += t.tensor.len(),
                _ => groups.push((key, t.tensor.len())),
            }
        }
        groups
    }

    /// See [`crate::nn::randomize_affine`].
    pub fn randomize_affine(&mut self, seed: u64) {
        crate::nn::randomize_affine(&mut self.tensors_mut(), seed);
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.tensor.zero_grad();
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            ModelGraph::Fast { net, .. } => net.clear_cache(),
            ModelGraph::Dual { net, .. } => net.clear_cache(),
        }
    }

    /// Encoder of the (transmission) trunk, used by the content loss.
    pub fn encoder(&self) -> &Encoder<T> {
        match self {
            ModelGraph::Fast { net, .. } => &net.trunk.encoder,
            ModelGraph::Dual { net, .. } => &net.trans.encoder,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Result<ModelGraph<U>> {
        let mut other = ModelGraph::<U>::build(self.kind(), self.config(), 0)?;
        let src = self.tensors();
        for (dst, s) in other.tensors_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, s.name);
            for (d, v) in dst.tensor.data_mut().iter_mut().zip(s.tensor.data()) {
                *d = U::lit(v.as_f64());
            }
        }
        Ok(other)
    }
}

fn check_divisible<T: Scalar>(x: &Tensor4<T>) -> Result<()> {
    let (h, w) = (x.h(), x.w());
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        let (padded_h, padded_w) = padded_dims(h, w);
        return Err(Error::IndivisibleInput { h, w, padded_h, padded_w });
    }
    Ok(())
}

/// Smallest multiples of 32 covering `h×w`.
pub fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE, w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE)
}

/// Mirror index without edge repetition, folding as often as needed.
fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Extends the bottom and right edges by reflection to `ph×pw`.
pub fn reflect_pad<T: Scalar>(x: &Tensor4<T>, ph: usize, pw: usize) -> Tensor4<T> {
    let [n, c, h, w] = x.dims();
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    let mut out = Tensor4::zeros([n, c, ph, pw]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ph {
                let sy = reflect_index(y, h);
                for xx in 0..pw {
                    let o = out.index(b, ch, y, xx);
                    out.data_mut()[o] = x.at(b, ch, sy, reflect_index(xx, w));
                }
            }
        }
    }
    out
}

pub fn crop_top_left<T: Scalar>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    let [n, c, xh, xw] = x.dims();
    if (xh, xw) == (h, w) {
        return x.detached();
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let s = x.index(b, ch, y, 0);
                data.extend_from_slice(&x.data()[s..s + w]);
            }
        }
    }
    Tensor4::from_vec([n, c, h, w], data).expect("crop dims")
}

/// Random linear functional over every output of a graph, for gradient
/// checking whole models.
pub struct GraphObjective<'m, T: Scalar> {
    pub model: &'m mut ModelGraph<T>,
    pub mode: Mode,
    seed: u64,
}

impl<'m, T: Scalar> GraphObjective<'m, T> {
    pub fn new(model: &'m mut ModelGraph<T>, mode: Mode, seed: u64) -> Self {
        Self { model, mode, seed }
    }

    fn weights(&self, target: Target, dims: [usize; 4]) -> Tensor4<T> {
        random_weights(dims, self.seed.wrapping_add(target as u64))
    }
}

impl<T: Scalar> Objective<T> for GraphObjective<'_, T> {
    fn value(&mut self, x: &Tensor4<T>) -> Result<T> {
        let out = self.model.forward(x, self.mode)?;
        let mut total = T::zero();
        for target in Target::ALL {
            if let Some(y) = out.get(target) {
                total += weighted_sum(y, &self.weights(target, y.dims()));
            }
        }
        Ok(total)
    }

    fn gradient(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.model.zero_grad();
        let out = self.model.forward(x, self.mode)?;
        let mut grads = OutputGrads::default();
        for target in Target::ALL {
            if let Some(y) = out.get(target) {
                *grads.slot(target) = Some(self.weights(target, y.dims()));
            }
        }
        self.model.backward(&grads)
    }

    fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, T>> {
        self.model.tensors_mut()
    }
}

/// Finite-difference check of every learnable tensor and the input of a
/// whole graph.
pub fn check_graph<T: Scalar>(model: &mut ModelGraph<T>, x: &Tensor4<T>, mode: Mode, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut obj = GraphObjective::new(model, mode, opts.seed ^ 0x9a7f);
    grad_check(&mut obj, x, opts)
}

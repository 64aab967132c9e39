//! Residual encoder, LinkNet decoder, full-resolution head and pyramid
//! refinement: the pieces both architectures are assembled from.

use rand::Rng;

use super::{EncoderKind, FastNetConfig};
use crate::error::{Error, Result};
use crate::nn::{
    add_skip, concat, join, split_channels, AdaptiveAvgPool2d, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, MaxPool2d, Mode, Module,
    NamedTensor, NamedTensorMut, Relu, Sequential, Sigmoid, Tensor4, UpsampleBilinear,
};
use crate::scalar::Scalar;

fn conv<T: Scalar, R: Rng>(rng: &mut R, ci: usize, co: usize, k: usize, s: usize, p: usize, bias: bool) -> Layer<T> {
    Layer::Conv(Conv2d::new(rng, ci, co, k, s, p, bias))
}

fn bn<T: Scalar>(c: usize) -> Layer<T> {
    Layer::BatchNorm(BatchNorm2d::new(c))
}

fn relu<T: Scalar>() -> Layer<T> {
    Layer::Relu(Relu::new())
}

/// `relu(main(x) + shortcut(x))`, with an identity shortcut when absent.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Scalar> {
    pub main: Sequential<T>,
    pub shortcut: Option<Sequential<T>>,
    act: Relu<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn basic<R: Rng>(rng: &mut R, cin: usize, cout: usize, stride: usize) -> Self {
        let main = Sequential::new(vec![
            conv(rng, cin, cout, 3, stride, 1, false),
            bn(cout),
            relu(),
            conv(rng, cout, cout, 3, 1, 1, false),
            bn(cout),
        ]);
        let shortcut = (cin != cout || stride != 1)
            .then(|| Sequential::new(vec![conv(rng, cin, cout, 1, stride, 0, false), bn(cout)]));
        Self {
            main,
            shortcut,
            act: Relu::new(),
        }
    }

    /// 1×1 reduce, strided 3×3, 1×1 expand to `4·mid`; the first block of a
    /// stage always projects.
    pub fn bottleneck<R: Rng>(rng: &mut R, cin: usize, mid: usize, stride: usize, first: bool) -> Self {
        let cout = 4 * mid;
        let main = Sequential::new(vec![
            conv(rng, cin, mid, 1, 1, 0, false),
            bn(mid),
            relu(),
            conv(rng, mid, mid, 3, stride, 1, false),
            bn(mid),
            relu(),
            conv(rng, mid, cout, 1, 1, 0, false),
            bn(cout),
        ]);
        let shortcut =
            (first || cin != cout || stride != 1).then(|| Sequential::new(vec![conv(rng, cin, cout, 1, stride, 0, false), bn(cout)]));
        Self {
            main,
            shortcut,
            act: Relu::new(),
        }
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let m = self.main.forward(x, mode)?;
        let s = match &mut self.shortcut {
            Some(sc) => sc.forward(x, mode)?,
            None => x.clone(),
        };
        self.act.forward(&add_skip(&m, &s)?, mode)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.act.backward(grad)?;
        let mut gx = self.main.backward(&g)?;
        match &mut self.shortcut {
            Some(sc) => gx.add_assign(&sc.backward(&g)?)?,
            None => gx.add_assign(&g)?,
        }
        Ok(gx)
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.main.tensors(&join(prefix, "main"), out);
        if let Some(sc) = &self.shortcut {
            sc.tensors(&join(prefix, "shortcut"), out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        self.main.tensors_mut(&join(prefix, "main"), out);
        if let Some(sc) = &mut self.shortcut {
            sc.tensors_mut(&join(prefix, "shortcut"), out);
        }
    }

    fn clear_cache(&mut self) {
        self.main.clear_cache();
        if let Some(sc) = &mut self.shortcut {
            sc.clear_cache();
        }
        Module::<T>::clear_cache(&mut self.act);
    }
}

/// A stack of residual blocks applied in order.
#[derive(Debug, Clone)]
pub struct Stage<T: Scalar> {
    pub blocks: Vec<ResidualBlock<T>>,
}

impl<T: Scalar> Module<T> for Stage<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let mut cur = x.clone();
        for b in &mut self.blocks {
            cur = b.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = grad.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.tensors(&join(prefix, &i.to_string()), out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.tensors_mut(&join(prefix, &i.to_string()), out);
        }
    }

    fn clear_cache(&mut self) {
        self.blocks.iter_mut().for_each(|b| b.clear_cache());
    }
}

/// ResNet-style encoder: 7×7/2 stem with 3×3/2 max pooling, then four
/// stages. Returns the four stage outputs at strides 4, 8, 16, 32.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    pub stem: Sequential<T>,
    pub stages: Vec<Stage<T>>,
    pub channels: [usize; 4],
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &FastNetConfig) -> Self {
        let w = cfg.base_width;
        let stem = Sequential::new(vec![
            conv(rng, 3, w, 7, 2, 3, false),
            bn(w),
            relu(),
            Layer::MaxPool(MaxPool2d::new(3, 2, 1)),
        ]);
        let channels = cfg.stage_channels();
        let mut cin = w;
        let mut stages = Vec::with_capacity(4);
        for (s, &n) in cfg.blocks_per_stage.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let blocks = (0..n)
                .map(|b| {
                    let st = if b == 0 { stride } else { 1 };
                    let block = match cfg.encoder_kind {
                        EncoderKind::Basic => ResidualBlock::basic(rng, cin, channels[s], st),
                        EncoderKind::Bottleneck => ResidualBlock::bottleneck(rng, cin, channels[s] / 4, st, b == 0),
                    };
                    cin = channels[s];
                    block
                })
                .collect();
            stages.push(Stage { blocks });
        }
        Self { stem, stages, channels }
    }

    /// Runs the stem and the first `depth` stages, returning each stage output.
    pub fn forward_features(&mut self, x: &Tensor4<T>, mode: Mode, depth: usize) -> Result<Vec<Tensor4<T>>> {
        let mut cur = self.stem.forward(x, mode)?;
        let mut outs = Vec::with_capacity(depth);
        for st in self.stages.iter_mut().take(depth) {
            cur = st.forward(&cur, mode)?;
            outs.push(cur.clone());
        }
        Ok(outs)
    }

    /// Backward from per-stage output gradients (deepest stage first in
    /// the chain); `grads[k]` is the gradient on stage `k`'s output.
    pub fn backward_features(&mut self, grads: Vec<Option<Tensor4<T>>>) -> Result<Tensor4<T>> {
        let depth = grads.len();
        let mut carry: Option<Tensor4<T>> = None;
        for (k, g) in grads.into_iter().enumerate().rev() {
            let total = match (carry.take(), g) {
                (Some(mut c), Some(g)) => {
                    c.add_assign(&g)?;
                    c
                }
                (Some(c), None) => c,
                (None, Some(g)) => g,
                (None, None) => return Err(Error::InvalidArgument(format!("no gradient reaches encoder stage {}", k + 1))),
            };
            carry = Some(self.stages[k].backward(&total)?);
        }
        let g = carry.ok_or_else(|| Error::InvalidArgument(format!("encoder backward over {depth} stages")))?;
        self.stem.backward(&g)
    }

    pub fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.stem.tensors(&join(prefix, "stem"), out);
        for (i, s) in self.stages.iter().enumerate() {
            s.tensors(&join(prefix, &format!("layer{}", i + 1)), out);
        }
    }

    pub fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        self.stem.tensors_mut(&join(prefix, "stem"), out);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.tensors_mut(&join(prefix, &format!("layer{}", i + 1)), out);
        }
    }

    pub fn clear_cache(&mut self) {
        self.stem.clear_cache();
        self.stages.iter_mut().for_each(|s| s.clear_cache());
    }
}

/// LinkNet decoder block: 1×1 to `cin/4`, 3×3 transposed conv ×2, 1×1 to
/// `cout`, each followed by norm and relu.
pub fn decoder_block<T: Scalar, R: Rng>(rng: &mut R, cin: usize, cout: usize) -> Sequential<T> {
    let m = (cin / 4).max(1);
    Sequential::new(vec![
        conv(rng, cin, m, 1, 1, 0, true),
        bn(m),
        relu(),
        Layer::ConvTranspose(ConvTranspose2d::new(rng, m, m, 3, 2, 1, 1, true)),
        bn(m),
        relu(),
        conv(rng, m, cout, 1, 1, 0, true),
        bn(cout),
        relu(),
    ])
}

/// Encoder, four decoders with feature forwarding, and the full-resolution
/// head ending in `feature_channels` maps at input resolution.
#[derive(Debug, Clone)]
pub struct EncoderDecoder<T: Scalar> {
    pub encoder: Encoder<T>,
    /// `decoders[k]` upsamples stage `k+1`'s resolution to stage `k`'s.
    pub decoders: Vec<Sequential<T>>,
    pub head: Sequential<T>,
}

impl<T: Scalar> EncoderDecoder<T> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &FastNetConfig) -> Self {
        let encoder = Encoder::new(rng, cfg);
        let s = encoder.channels;
        let f = cfg.feature_channels;
        let decoders = vec![
            decoder_block(rng, s[0], s[0]),
            decoder_block(rng, s[1], s[0]),
            decoder_block(rng, s[2], s[1]),
            decoder_block(rng, s[3], s[2]),
        ];
        let head = Sequential::new(vec![
            Layer::ConvTranspose(ConvTranspose2d::new(rng, s[0], f, 3, 2, 1, 1, true)),
            bn(f),
            relu(),
            conv(rng, f, f, 3, 1, 1, true),
            bn(f),
            relu(),
            Layer::ConvTranspose(ConvTranspose2d::new(rng, f, f, 3, 1, 1, 0, true)),
        ]);
        Self { encoder, decoders, head }
    }
}

impl<T: Scalar> Module<T> for EncoderDecoder<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let e = self.encoder.forward_features(x, mode, 4)?;
        let mut d = self.decoders[3].forward(&e[3], mode)?;
        for k in (1..3).rev() {
            d = self.decoders[k].forward(&add_skip(&d, &e[k])?, mode)?;
        }
        let d1 = self.decoders[0].forward(&add_skip(&d, &e[0])?, mode)?;
        self.head.forward(&d1, mode)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.head.backward(grad)?;
        // gradient on (decoder_{k+1} output + e_k) for k = 0, 1, 2
        let g0 = self.decoders[0].backward(&g)?;
        let g1 = self.decoders[1].backward(&g0)?;
        let g2 = self.decoders[2].backward(&g1)?;
        let g3 = self.decoders[3].backward(&g2)?;
        self.encoder.backward_features(vec![Some(g0), Some(g1), Some(g2), Some(g3)])
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        self.encoder.tensors(&join(prefix, "encoder"), out);
        for (i, d) in self.decoders.iter().enumerate() {
            d.tensors(&join(prefix, &format!("decoder{}", i + 1)), out);
        }
        self.head.tensors(&join(prefix, "head"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        self.encoder.tensors_mut(&join(prefix, "encoder"), out);
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.tensors_mut(&join(prefix, &format!("decoder{}", i + 1)), out);
        }
        self.head.tensors_mut(&join(prefix, "head"), out);
    }

    fn clear_cache(&mut self) {
        self.encoder.clear_cache();
        self.decoders.iter_mut().for_each(|d| d.clear_cache());
        self.head.clear_cache();
    }
}

#[derive(Debug, Clone)]
struct Branch<T: Scalar> {
    pool: AdaptiveAvgPool2d,
    conv: Conv2d<T>,
    up: UpsampleBilinear,
}

/// Pyramid pooling refinement: per grid size `g`, pool to `g×g`, 1×1 conv to
/// `branch_channels`, upsample back; concatenate with the input, 3×3 conv to
/// three channels, sigmoid.
#[derive(Debug, Clone)]
pub struct Refinement<T: Scalar> {
    pub in_channels: usize,
    pub branch_channels: usize,
    branches: Vec<Branch<T>>,
    pub fuse: Conv2d<T>,
    act: Sigmoid<T>,
}

impl<T: Scalar> Refinement<T> {
    pub fn new<R: Rng>(rng: &mut R, in_channels: usize, branch_channels: usize, scales: &[usize]) -> Self {
        let branches = scales
            .iter()
            .map(|&g| Branch {
                pool: AdaptiveAvgPool2d::new(g, g),
                conv: Conv2d::new(rng, in_channels, branch_channels, 1, 1, 0, true),
                up: UpsampleBilinear::new(1, 1),
            })
            .collect::<Vec<_>>();
        let fused = in_channels + branches.len() * branch_channels;
        Self {
            in_channels,
            branch_channels,
            fuse: Conv2d::new(rng, fused, 3, 3, 1, 1, true),
            branches,
            act: Sigmoid::new(),
        }
    }

    pub fn scales(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.pool.out_h).collect()
    }
}

impl<T: Scalar> Module<T> for Refinement<T> {
    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let (h, w) = (x.h(), x.w());
        let mut parts = vec![x.clone()];
        for b in &mut self.branches {
            let p = b.pool.forward(x, mode)?;
            let c = b.conv.forward(&p, mode)?;
            b.up.out_h = h;
            b.up.out_w = w;
            parts.push(b.up.forward(&c, mode)?);
        }
        let cat = concat(&parts.iter().collect::<Vec<_>>())?;
        let y = self.fuse.forward(&cat, mode)?;
        self.act.forward(&y, mode)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.act.backward(grad)?;
        let g = self.fuse.backward(&g)?;
        let mut sizes = vec![self.in_channels];
        sizes.extend(std::iter::repeat_n(self.branch_channels, self.branches.len()));
        let mut parts = split_channels(&g, &sizes)?.into_iter();
        let mut gx = parts.next().expect("input part");
        for (b, gp) in self.branches.iter_mut().zip(parts) {
            let gc = Module::<T>::backward(&mut b.up, &gp)?;
            let gp = b.conv.backward(&gc)?;
            gx.add_assign(&Module::<T>::backward(&mut b.pool, &gp)?)?;
        }
        Ok(gx)
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a, T>>) {
        for (i, b) in self.branches.iter().enumerate() {
            b.conv.tensors(&join(prefix, &format!("pool{}", i)), out);
        }
        self.fuse.tensors(&join(prefix, "fuse"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a, T>>) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.conv.tensors_mut(&join(prefix, &format!("pool{}", i)), out);
        }
        self.fuse.tensors_mut(&join(prefix, "fuse"), out);
    }

    fn clear_cache(&mut self) {
        for b in &mut self.branches {
            Module::<T>::clear_cache(&mut b.pool);
            b.conv.clear_cache();
            Module::<T>::clear_cache(&mut b.up);
        }
        self.fuse.clear_cache();
        Module::<T>::clear_cache(&mut self.act);
    }
}

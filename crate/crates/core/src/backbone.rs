//! Feature extractors: a strided-convolution image encoder for the region
//! branch and a Transformer patch encoder for the patch branch.
//!
//! Both are config-driven. The `tiny` preset trains on a CPU in minutes and
//! exercises every downstream shape; the `pretrained-large` preset declares
//! the conventional 224px shapes ((2048, 7, 7) feature maps, 196 x 768 patch
//! tokens) behind the same interface for externally converted weights.

use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, relu, relu_backward, softmax, softmax_backward, Conv2d, Conv2dCache,
    GroupNorm, GroupNormCache, LayerNorm, LayerNormCache, Linear, LinearCache,
};
use crate::rng::Rng;
use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

/// Channel-first spatial feature map `(c, h, w)`.
pub type SpatialFeatureMap = Array3<f64>;
/// Patch token sequence `(n, d)`.
pub type PatchSequence = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Tiny,
    PretrainedLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionBackboneConfig {
    /// Output channels `c`.
    pub channels: usize,
    /// Output grid side (`h = w`).
    pub grid: usize,
    pub input_side: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBackboneConfig {
    /// Token width `D`.
    pub hidden: usize,
    pub patch_side: usize,
    pub layers: usize,
    pub heads: usize,
    /// RoI input side; must be divisible by `patch_side`.
    pub input_side: usize,
}

impl PatchBackboneConfig {
    pub fn tokens(&self) -> usize {
        let g = self.input_side / self.patch_side;
        g * g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub region: RegionBackboneConfig,
    pub patch: PatchBackboneConfig,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        BackboneConfig {
            kind: BackboneKind::Tiny,
            region: RegionBackboneConfig {
                channels: 64,
                grid: 8,
                input_side: 64,
            },
            patch: PatchBackboneConfig {
                hidden: 64,
                patch_side: 16,
                layers: 2,
                heads: 4,
                input_side: 64,
            },
        }
    }

    pub fn pretrained_large() -> Self {
        BackboneConfig {
            kind: BackboneKind::PretrainedLarge,
            region: RegionBackboneConfig {
                channels: 2048,
                grid: 7,
                input_side: 224,
            },
            patch: PatchBackboneConfig {
                hidden: 768,
                patch_side: 16,
                layers: 12,
                heads: 12,
                input_side: 224,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.region;
        if r.grid == 0 || r.input_side % r.grid != 0 || !(r.input_side / r.grid).is_power_of_two() {
            return Err(Error::Config(format!(
                "region input side {} must be grid {} times a power of two",
                r.input_side, r.grid
            )));
        }
        let p = &self.patch;
        if p.input_side % p.patch_side != 0 {
            return Err(Error::Config(format!(
                "patch input side {} not divisible by patch side {}",
                p.input_side, p.patch_side
            )));
        }
        if p.hidden % p.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                p.hidden, p.heads
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Region encoder: strided conv blocks (conv 3x3/s2 + GroupNorm + relu), with
// an optional trailing 1x1 expansion when the stride schedule tops out below
// the configured channel count.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

pub struct ConvBlockCache {
    conv: Conv2dCache,
    norm: GroupNormCache,
    pre_relu: Array3<f64>,
}

impl ConvBlock {
    fn new(rng: &mut Rng, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        let padding = kernel / 2;
        let groups = if out_c % 8 == 0 { 8 } else { 1 };
        ConvBlock {
            conv: Conv2d::new(rng, in_c, out_c, kernel, stride, padding),
            norm: GroupNorm::new(out_c, groups),
        }
    }

    fn zeros_like(&self) -> Self {
        ConvBlock {
            conv: self.conv.zeros_like(),
            norm: self.norm.zeros_like(),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ConvBlockCache)> {
        let (c_out, conv_cache) = self.conv.forward(x)?;
        let (pre_relu, norm_cache) = self.norm.forward(&c_out)?;
        let y = relu(&pre_relu);
        Ok((
            y,
            ConvBlockCache {
                conv: conv_cache,
                norm: norm_cache,
                pre_relu,
            },
        ))
    }

    fn backward(&self, cache: &ConvBlockCache, dy: &Array3<f64>, grads: &mut Self) -> Array3<f64> {
        let d_pre = relu_backward(&cache.pre_relu, dy);
        let d_conv = self.norm.backward(&cache.norm, &d_pre, &mut grads.norm);
        self.conv.backward(&cache.conv, &d_conv, &mut grads.conv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEncoder {
    pub blocks: Vec<ConvBlock>,
    pub config: RegionBackboneConfig,
}

pub struct RegionEncoderCache {
    blocks: Vec<ConvBlockCache>,
}

fn conv_width_schedule(config: &RegionBackboneConfig) -> (Vec<usize>, bool) {
    let stages = (config.input_side / config.grid).trailing_zeros() as usize;
    let first = if config.channels <= 128 { 16 } else { 64 };
    let cap = config.channels.min(512);
    let widths: Vec<usize> = (0..stages).map(|i| (first << i).min(cap)).collect();
    let needs_expansion = *widths.last().expect("at least one stage") != config.channels;
    (widths, needs_expansion)
}

impl RegionEncoder {
    pub fn new(rng: &mut Rng, config: RegionBackboneConfig) -> Self {
        let (widths, needs_expansion) = conv_width_schedule(&config);
        let mut blocks = Vec::new();
        let mut in_c = 3;
        for &w in &widths {
            blocks.push(ConvBlock::new(rng, in_c, w, 3, 2));
            in_c = w;
        }
        if needs_expansion {
            blocks.push(ConvBlock::new(rng, in_c, config.channels, 1, 1));
        }
        RegionEncoder { blocks, config }
    }

    pub fn zeros_like(&self) -> Self {
        RegionEncoder {
            blocks: self.blocks.iter().map(ConvBlock::zeros_like).collect(),
            config: self.config,
        }
    }

    /// Encode an RGB image `(3, side, side)` into `(c, grid, grid)`.
    pub fn forward(&self, image: &Array3<f64>) -> Result<(SpatialFeatureMap, RegionEncoderCache)> {
        let (c, h, w) = image.dim();
        if c != 3 || h != self.config.input_side || w != self.config.input_side {
            return Err(Error::shape(
                "encode_region_image",
                format!(
                    "expected (3, {side}, {side}) input, got ({c}, {h}, {w})",
                    side = self.config.input_side
                ),
            ));
        }
        let mut x = image.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, RegionEncoderCache { blocks: caches }))
    }

    pub fn backward(
        &self,
        cache: &RegionEncoderCache,
        dy: &Array3<f64>,
        grads: &mut Self,
    ) -> Array3<f64> {
        let mut d = dy.clone();
        for ((block, block_cache), block_grads) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(&mut grads.blocks)
            .rev()
        {
            d = block.backward(block_cache, &d, block_grads);
        }
        d
    }
}

// ---------------------------------------------------------------------------
// Patch encoder: linear patch projection + learned position embeddings +
// pre-norm Transformer encoder layers.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadSelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct MhsaCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>, // per head (n, n)
    concat_cache: LinearCache,
}

impl MultiHeadSelfAttention {
    fn new(rng: &mut Rng, dim: usize, heads: usize) -> Self {
        MultiHeadSelfAttention {
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, dim, dim),
            wv: Linear::new(rng, dim, dim),
            wo: Linear::new(rng, dim, dim),
            heads,
        }
    }

    fn zeros_like(&self) -> Self {
        MultiHeadSelfAttention {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            heads: self.heads,
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, MhsaCache)> {
        let (n, dim) = x.dim();
        let d = dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (q, q_cache) = self.wq.forward(x)?;
        let (k, k_cache) = self.wk.forward(x)?;
        let (v, v_cache) = self.wv.forward(x)?;
        let mut concat = Array2::zeros((n, dim));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * d..(h + 1) * d;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let scores = qh.dot(&kh.t()) * scale;
            let mut weights = Array2::zeros((n, n));
            for (i, row) in scores.outer_iter().enumerate() {
                let soft = softmax(&row.to_owned());
                weights.row_mut(i).assign(&soft);
            }
            let out_h = weights.dot(&vh);
            concat.slice_mut(s![.., cols]).assign(&out_h);
            attn.push(weights);
        }
        let (out, concat_cache) = self.wo.forward(&concat)?;
        Ok((
            out,
            MhsaCache {
                q_cache,
                k_cache,
                v_cache,
                q,
                k,
                v,
                attn,
                concat_cache,
            },
        ))
    }

    fn backward(&self, cache: &MhsaCache, dy: &Array2<f64>, grads: &mut Self) -> Array2<f64> {
        let (n, dim) = cache.q.dim();
        let d = dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let d_concat = self.wo.backward(&cache.concat_cache, dy, &mut grads.wo);
        let mut dq = Array2::zeros((n, dim));
        let mut dk = Array2::zeros((n, dim));
        let mut dv = Array2::zeros((n, dim));
        for h in 0..self.heads {
            let cols = h * d..(h + 1) * d;
            let d_out_h = d_concat.slice(s![.., cols.clone()]);
            let weights = &cache.attn[h];
            let vh = cache.v.slice(s![.., cols.clone()]);
            let qh = cache.q.slice(s![.., cols.clone()]);
            let kh = cache.k.slice(s![.., cols.clone()]);

            let d_weights = d_out_h.dot(&vh.t());
            dv.slice_mut(s![.., cols.clone()])
                .assign(&weights.t().dot(&d_out_h));
            let mut d_scores = Array2::zeros((n, n));
            for i in 0..n {
                let grad = softmax_backward(
                    &weights.row(i).to_owned(),
                    &d_weights.row(i).to_owned(),
                );
                d_scores.row_mut(i).assign(&grad);
            }
            d_scores *= scale;
            dq.slice_mut(s![.., cols.clone()]).assign(&d_scores.dot(&kh));
            dk.slice_mut(s![.., cols]).assign(&d_scores.t().dot(&qh));
        }
        let mut dx = self.wq.backward(&cache.q_cache, &dq, &mut grads.wq);
        dx += &self.wk.backward(&cache.k_cache, &dk, &mut grads.wk);
        dx += &self.wv.backward(&cache.v_cache, &dv, &mut grads.wv);
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct EncoderLayerCache {
    ln1: LayerNormCache,
    attn: MhsaCache,
    ln2: LayerNormCache,
    fc1: LinearCache,
    fc1_out: Array2<f64>,
    fc2: LinearCache,
}

impl EncoderLayer {
    fn new(rng: &mut Rng, dim: usize, heads: usize) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadSelfAttention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(rng, dim, dim * 4),
            fc2: Linear::new(rng, dim * 4, dim),
        }
    }

    fn zeros_like(&self) -> Self {
        EncoderLayer {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, EncoderLayerCache)> {
        let (a, ln1_cache) = self.ln1.forward(x)?;
        let (attn_out, attn_cache) = self.attn.forward(&a)?;
        let x2 = x + &attn_out;
        let (b, ln2_cache) = self.ln2.forward(&x2)?;
        let (fc1_out, fc1_cache) = self.fc1.forward(&b)?;
        let hidden = gelu(&fc1_out);
        let (mlp_out, fc2_cache) = self.fc2.forward(&hidden)?;
        let y = &x2 + &mlp_out;
        Ok((
            y,
            EncoderLayerCache {
                ln1: ln1_cache,
                attn: attn_cache,
                ln2: ln2_cache,
                fc1: fc1_cache,
                fc1_out,
                fc2: fc2_cache,
            },
        ))
    }

    fn backward(
        &self,
        cache: &EncoderLayerCache,
        dy: &Array2<f64>,
        grads: &mut Self,
    ) -> Array2<f64> {
        let d_hidden = self.fc2.backward(&cache.fc2, dy, &mut grads.fc2);
        let d_fc1_out = gelu_backward(&cache.fc1_out, &d_hidden);
        let d_b = self.fc1.backward(&cache.fc1, &d_fc1_out, &mut grads.fc1);
        let mut d_x2 = self.ln2.backward(&cache.ln2, &d_b, &mut grads.ln2);
        d_x2 += dy;
        let d_a = self.attn.backward(&cache.attn, &d_x2, &mut grads.attn);
        let mut dx = self.ln1.backward(&cache.ln1, &d_a, &mut grads.ln1);
        dx += &d_x2;
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    pub proj: Linear,
    pub pos: Array2<f64>, // (n, hidden)
    pub layers: Vec<EncoderLayer>,
    pub config: PatchBackboneConfig,
}

pub struct PatchEncoderCache {
    proj_cache: LinearCache,
    layers: Vec<EncoderLayerCache>,
}

impl PatchEncoder {
    pub fn new(rng: &mut Rng, config: PatchBackboneConfig) -> Self {
        let patch_dim = 3 * config.patch_side * config.patch_side;
        let proj = Linear::new(rng, patch_dim, config.hidden);
        let pos = crate::nn::init::normal(rng, (config.tokens(), config.hidden), 0.02);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::new(rng, config.hidden, config.heads))
            .collect();
        PatchEncoder {
            proj,
            pos,
            layers,
            config,
        }
    }

    pub fn zeros_like(&self) -> Self {
        PatchEncoder {
            proj: self.proj.zeros_like(),
            pos: Array2::zeros(self.pos.raw_dim()),
            layers: self.layers.iter().map(EncoderLayer::zeros_like).collect(),
            config: self.config,
        }
    }

    /// Split an RoI into non-overlapping patches and flatten each one
    /// channel-major: row `gy * grid + gx` holds patch `(gy, gx)`.
    pub fn patchify(&self, roi: &Array3<f64>) -> Result<Array2<f64>> {
        let (c, h, w) = roi.dim();
        let side = self.config.input_side;
        if c != 3 || h != side || w != side {
            return Err(Error::shape(
                "encode_patches",
                format!("expected (3, {side}, {side}) RoI, got ({c}, {h}, {w})"),
            ));
        }
        let p = self.config.patch_side;
        let grid = side / p;
        let mut flat = Array2::zeros((grid * grid, 3 * p * p));
        for gy in 0..grid {
            for gx in 0..grid {
                let token = gy * grid + gx;
                let mut col = 0;
                for ch in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            flat[(token, col)] = roi[(ch, gy * p + py, gx * p + px)];
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(flat)
    }

    /// Patch projections before position embeddings are added; constant-color
    /// inputs produce identical rows here.
    pub fn project_patches(&self, roi: &Array3<f64>) -> Result<Array2<f64>> {
        let flat = self.patchify(roi)?;
        let (projected, _) = self.proj.forward(&flat)?;
        Ok(projected)
    }

    /// Encode an RoI into a `(n, hidden)` token sequence.
    pub fn forward(&self, roi: &Array3<f64>) -> Result<(PatchSequence, PatchEncoderCache)> {
        let flat = self.patchify(roi)?;
        let (projected, proj_cache) = self.proj.forward(&flat)?;
        let mut x = projected + &self.pos;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x)?;
            layer_caches.push(cache);
            x = y;
        }
        Ok((
            x,
            PatchEncoderCache {
                proj_cache,
                layers: layer_caches,
            },
        ))
    }

    /// Backward from token gradients to parameter gradients; returns the
    /// gradient w.r.t. the RoI pixels.
    pub fn backward(
        &self,
        cache: &PatchEncoderCache,
        dy: &Array2<f64>,
        grads: &mut Self,
    ) -> Array3<f64> {
        let mut d = dy.clone();
        for ((layer, layer_cache), layer_grads) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(&mut grads.layers)
            .rev()
        {
            d = layer.backward(layer_cache, &d, layer_grads);
        }
        grads.pos += &d;
        let d_flat = self.proj.backward(&cache.proj_cache, &d, &mut grads.proj);
        // un-patchify: every pixel belongs to exactly one token
        let side = self.config.input_side;
        let p = self.config.patch_side;
        let grid = side / p;
        let mut d_roi = Array3::zeros((3, side, side));
        for gy in 0..grid {
            for gx in 0..grid {
                let token = gy * grid + gx;
                let mut col = 0;
                for ch in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            d_roi[(ch, gy * p + py, gx * p + px)] = d_flat[(token, col)];
                            col += 1;
                        }
                    }
                }
            }
        }
        d_roi
    }
}

/// Mean over spatial positions of a feature map; the attribute-agnostic
/// pooling used by the plain-triplet baseline.
pub fn mean_pool_map(x: &SpatialFeatureMap) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let flat = x
        .view()
        .into_shape_with_order((c, h * w))
        .expect("contiguous map");
    flat.mean_axis(Axis(1)).expect("non-empty map")
}

/// Backward of [`mean_pool_map`].
pub fn mean_pool_map_backward(dpooled: &Array1<f64>, h: usize, w: usize) -> SpatialFeatureMap {
    let c = dpooled.len();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        out.index_axis_mut(Axis(0), ch).fill(dpooled[ch] * scale);
    }
    out
}

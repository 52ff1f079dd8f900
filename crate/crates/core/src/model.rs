//! The assembled two-branch model: region encoder + attribute table +
//! region branch, and patch encoder + patch branch, glued by the RoI crop.
//!
//! Parameters are exposed as named flat groups (for the optimizer, for
//! checkpoints and for stage-wise freezing) through `named_param_views`;
//! gradients live in a second zeroed instance of the same struct.

use crate::backbone::{BackboneConfig, PatchEncoder, PatchEncoderCache, RegionEncoder, RegionEncoderCache};
use crate::data::AttributeId;
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, l2_normalize_backward, Linear};
use crate::region::{AttentionPair, RegionBranch, RegionBranchCache, RegionOutput, ResidualHead, ResidualHeadCache};
use crate::patch::{PatchBranch, PatchBranchCache};
use crate::roi::{attention_to_bbox, crop_and_resize, resize_rgb, CropBox, RoiParams};
use crate::rng::Rng;
use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_attributes: usize,
    /// Attribute embedding width `c_a`.
    pub attr_dim: usize,
    /// Joint latent width `c_m`.
    pub joint_dim: usize,
    /// Output embedding width `c_o`.
    pub embed_dim: usize,
    pub roi: RoiParams,
}

impl ModelConfig {
    pub fn tiny(num_attributes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::tiny(),
            num_attributes,
            attr_dim: 32,
            joint_dim: 64,
            embed_dim: 64,
            roi: RoiParams::default(),
        }
    }

    pub fn pretrained_large(num_attributes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::pretrained_large(),
            num_attributes,
            attr_dim: 512,
            joint_dim: 512,
            embed_dim: 1024,
            roi: RoiParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_attributes == 0 {
            return Err(Error::Config("model needs at least one attribute".into()));
        }
        Ok(())
    }
}

/// The three embeddings of one (image, attribute) pass: region foreground
/// `r`, region background, patch foreground `p`. All L2-normalized, length
/// `embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTriple {
    pub region_fg: Array1<f64>,
    pub region_bg: Array1<f64>,
    pub patch_fg: Array1<f64>,
}

/// Attention maps and RoI geometry of one forward pass, for inspection and
/// export.
#[derive(Debug, Clone)]
pub struct ForwardDiagnostics {
    pub attention: AttentionPair,
    pub crop: CropBox,
    /// Per-head attribute-to-patch attention weights `(heads, n)`.
    pub patch_attention: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpfModel {
    pub config: ModelConfig,
    pub region_encoder: RegionEncoder,
    pub attr_table: Array2<f64>, // (num_attributes, attr_dim)
    pub region_branch: RegionBranch,
    pub patch_encoder: PatchEncoder,
    pub patch_branch: PatchBranch,
}

pub struct TrainForwardCache {
    pub encoder: RegionEncoderCache,
    pub branch: RegionBranchCache,
    pub patch: Option<(PatchEncoderCache, PatchBranchCache)>,
}

/// One sample's training-time forward outputs.
pub struct TrainForward {
    pub region: RegionOutput,
    pub patch_fg: Option<Array1<f64>>,
    pub cache: TrainForwardCache,
}

impl RpfModel {
    pub fn new(rng: &mut Rng, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let region_encoder = RegionEncoder::new(rng, config.backbone.region);
        let attr_table = crate::nn::init::normal(rng, (config.num_attributes, config.attr_dim), 0.02);
        let region_branch = RegionBranch::new(
            rng,
            config.backbone.region.channels,
            config.attr_dim,
            config.joint_dim,
            config.embed_dim,
        );
        let patch_encoder = PatchEncoder::new(rng, config.backbone.patch);
        let patch_branch = PatchBranch::new(
            rng,
            config.attr_dim,
            config.backbone.patch.hidden,
            config.backbone.patch.heads,
            config.embed_dim,
        );
        Ok(RpfModel {
            config,
            region_encoder,
            attr_table,
            region_branch,
            patch_encoder,
            patch_branch,
        })
    }

    pub fn zeros_like(&self) -> Self {
        RpfModel {
            config: self.config,
            region_encoder: self.region_encoder.zeros_like(),
            attr_table: Array2::zeros(self.attr_table.raw_dim()),
            region_branch: self.region_branch.zeros_like(),
            patch_encoder: self.patch_encoder.zeros_like(),
            patch_branch: self.patch_branch.zeros_like(),
        }
    }

    pub fn attribute_embedding(&self, attribute: AttributeId) -> Result<Array1<f64>> {
        if attribute >= self.config.num_attributes {
            return Err(Error::Data(format!(
                "attribute id {attribute} out of range (model has {})",
                self.config.num_attributes
            )));
        }
        Ok(self.attr_table.row(attribute).to_owned())
    }

    /// Resize an arbitrary RGB array to the region input side if needed.
    pub fn prepare_input(&self, image: &Array3<f64>) -> Array3<f64> {
        let side = self.config.backbone.region.input_side;
        let (_, h, w) = image.dim();
        if h == side && w == side {
            image.clone()
        } else {
            resize_rgb(image, side)
        }
    }

    /// Region branch only: embeddings plus attention maps.
    pub fn region_forward(
        &self,
        image: &Array3<f64>,
        attribute: AttributeId,
    ) -> Result<RegionOutput> {
        let f_a = self.attribute_embedding(attribute)?;
        let input = self.prepare_input(image);
        let (map, _) = self.region_encoder.forward(&input)?;
        let (out, _) = self.region_branch.forward(&map, &f_a)?;
        Ok(out)
    }

    /// Full pipeline on an arbitrary-size RGB image: region branch, RoI crop
    /// from the *original* image, patch branch.
    pub fn embed(
        &self,
        image: &Array3<f64>,
        attribute: AttributeId,
    ) -> Result<(EmbeddingTriple, ForwardDiagnostics)> {
        let f_a = self.attribute_embedding(attribute)?;
        let input = self.prepare_input(image);
        let (map, _) = self.region_encoder.forward(&input)?;
        let (region_out, _) = self.region_branch.forward(&map, &f_a)?;

        let (_, h, w) = image.dim();
        let crop = attention_to_bbox(&region_out.attention.foreground, (h, w), &self.config.roi);
        let roi = crop_and_resize(image, &crop, self.config.backbone.patch.input_side)?;
        let (tokens, _) = self.patch_encoder.forward(&roi)?;
        let (patch_fg, patch_attention, _) = self.patch_branch.forward(&f_a, &tokens)?;

        Ok((
            EmbeddingTriple {
                region_fg: region_out.foreground.clone(),
                region_bg: region_out.background.clone(),
                patch_fg,
            },
            ForwardDiagnostics {
                attention: region_out.attention,
                crop,
                patch_attention,
            },
        ))
    }

    /// Training forward on a pre-resized input image, keeping caches. The
    /// patch branch runs only when `with_patch` (stage 2).
    pub fn forward_train(
        &self,
        image: &Array3<f64>,
        attribute: AttributeId,
        with_patch: bool,
    ) -> Result<TrainForward> {
        let f_a = self.attribute_embedding(attribute)?;
        let (map, encoder_cache) = self.region_encoder.forward(image)?;
        let (region_out, branch_cache) = self.region_branch.forward(&map, &f_a)?;
        let (patch_fg, patch_cache) = if with_patch {
            let (_, h, w) = image.dim();
            let crop = attention_to_bbox(&region_out.attention.foreground, (h, w), &self.config.roi);
            let roi = crop_and_resize(image, &crop, self.config.backbone.patch.input_side)?;
            let (tokens, enc_cache) = self.patch_encoder.forward(&roi)?;
            let (p, _, br_cache) = self.patch_branch.forward(&f_a, &tokens)?;
            (Some(p), Some((enc_cache, br_cache)))
        } else {
            (None, None)
        };
        Ok(TrainForward {
            region: region_out,
            patch_fg,
            cache: TrainForwardCache {
                encoder: encoder_cache,
                branch: branch_cache,
                patch: patch_cache,
            },
        })
    }

    /// Training backward for one sample. In stage 2 the region encoder,
    /// attribute table and joint projection stay untouched; gradients reach
    /// only the region head (and projector-free paths), the patch encoder and
    /// the patch branch.
    pub fn backward_train(
        &self,
        forward: &TrainForward,
        attribute: AttributeId,
        d_region_fg: &Array1<f64>,
        d_region_bg: &Array1<f64>,
        d_patch_fg: Option<&Array1<f64>>,
        stage2: bool,
        grads: &mut RpfModel,
    ) {
        if let Some(dp) = d_patch_fg {
            let (_, patch_branch_cache) = forward
                .cache
                .patch
                .as_ref()
                .expect("patch cache present when patch grad given");
            let (_d_f_a, d_tokens) =
                self.patch_branch
                    .backward(patch_branch_cache, dp, &mut grads.patch_branch);
            let (enc_cache, _) = forward.cache.patch.as_ref().unwrap();
            self.patch_encoder
                .backward(enc_cache, &d_tokens, &mut grads.patch_encoder);
            // gradient w.r.t. the RoI pixels stops here: the crop is not
            // differentiable, and in stage 2 the attribute table is frozen
        }
        let (dx, d_f_a) = self.region_branch.backward(
            &forward.cache.branch,
            d_region_fg,
            d_region_bg,
            !stage2,
            &mut grads.region_branch,
        );
        if !stage2 {
            self.region_encoder
                .backward(&forward.cache.encoder, &dx, &mut grads.region_encoder);
            let mut row = grads.attr_table.row_mut(attribute);
            row += &d_f_a;
        }
    }

    /// Named views over every parameter array, in canonical order.
    pub fn named_param_views(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        let RpfModel {
            config: _,
            region_encoder,
            attr_table,
            region_branch,
            patch_encoder,
            patch_branch,
        } = self;
        for (i, b) in region_encoder.blocks.iter().enumerate() {
            out.push((format!("region_encoder.block{i}.conv.weight"), b.conv.weight.view().into_dyn()));
            out.push((format!("region_encoder.block{i}.conv.bias"), b.conv.bias.view().into_dyn()));
            out.push((format!("region_encoder.block{i}.norm.gain"), b.norm.gain.view().into_dyn()));
            out.push((format!("region_encoder.block{i}.norm.bias"), b.norm.bias.view().into_dyn()));
        }
        out.push(("attr_table".into(), attr_table.view().into_dyn()));
        push_linear_views(&mut out, "region.joint.map", &region_branch.joint.map_proj);
        push_linear_views(&mut out, "region.joint.attr", &region_branch.joint.attr_proj);
        if let Some(p) = &region_branch.projector {
            push_linear_views(&mut out, "region.projector", p);
        }
        push_head_views(&mut out, "region.head", &region_branch.head);
        push_linear_views(&mut out, "patch_encoder.proj", &patch_encoder.proj);
        out.push(("patch_encoder.pos".into(), patch_encoder.pos.view().into_dyn()));
        for (i, l) in patch_encoder.layers.iter().enumerate() {
            let p = format!("patch_encoder.layer{i}");
            out.push((format!("{p}.ln1.gain"), l.ln1.gain.view().into_dyn()));
            out.push((format!("{p}.ln1.bias"), l.ln1.bias.view().into_dyn()));
            push_linear_views(&mut out, &format!("{p}.attn.wq"), &l.attn.wq);
            push_linear_views(&mut out, &format!("{p}.attn.wk"), &l.attn.wk);
            push_linear_views(&mut out, &format!("{p}.attn.wv"), &l.attn.wv);
            push_linear_views(&mut out, &format!("{p}.attn.wo"), &l.attn.wo);
            out.push((format!("{p}.ln2.gain"), l.ln2.gain.view().into_dyn()));
            out.push((format!("{p}.ln2.bias"), l.ln2.bias.view().into_dyn()));
            push_linear_views(&mut out, &format!("{p}.fc1"), &l.fc1);
            push_linear_views(&mut out, &format!("{p}.fc2"), &l.fc2);
        }
        push_linear_views(&mut out, "patch.attr_fc", &patch_branch.attr_fc);
        out.push(("patch.types.attribute".into(), patch_branch.types.attribute.view().into_dyn()));
        out.push(("patch.types.patch".into(), patch_branch.types.patch.view().into_dyn()));
        push_linear_views(&mut out, "patch.cross.wq", &patch_branch.cross.wq);
        push_linear_views(&mut out, "patch.cross.wk", &patch_branch.cross.wk);
        push_linear_views(&mut out, "patch.cross.wv", &patch_branch.cross.wv);
        push_linear_views(&mut out, "patch.cross.wo", &patch_branch.cross.wo);
        push_head_views(&mut out, "patch.head", &patch_branch.head);
        if let Some(p) = &patch_branch.out_proj {
            push_linear_views(&mut out, "patch.out_proj", p);
        }
        out
    }

    /// Mutable counterpart of [`named_param_views`], same order.
    pub fn named_param_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        let RpfModel {
            config: _,
            region_encoder,
            attr_table,
            region_branch,
            patch_encoder,
            patch_branch,
        } = self;
        for (i, b) in region_encoder.blocks.iter_mut().enumerate() {
            out.push((format!("region_encoder.block{i}.conv.weight"), b.conv.weight.view_mut().into_dyn()));
            out.push((format!("region_encoder.block{i}.conv.bias"), b.conv.bias.view_mut().into_dyn()));
            out.push((format!("region_encoder.block{i}.norm.gain"), b.norm.gain.view_mut().into_dyn()));
            out.push((format!("region_encoder.block{i}.norm.bias"), b.norm.bias.view_mut().into_dyn()));
        }
        out.push(("attr_table".into(), attr_table.view_mut().into_dyn()));
        push_linear_views_mut(&mut out, "region.joint.map", &mut region_branch.joint.map_proj);
        push_linear_views_mut(&mut out, "region.joint.attr", &mut region_branch.joint.attr_proj);
        if let Some(p) = &mut region_branch.projector {
            push_linear_views_mut(&mut out, "region.projector", p);
        }
        push_head_views_mut(&mut out, "region.head", &mut region_branch.head);
        push_linear_views_mut(&mut out, "patch_encoder.proj", &mut patch_encoder.proj);
        out.push(("patch_encoder.pos".into(), patch_encoder.pos.view_mut().into_dyn()));
        for (i, l) in patch_encoder.layers.iter_mut().enumerate() {
            let p = format!("patch_encoder.layer{i}");
            out.push((format!("{p}.ln1.gain"), l.ln1.gain.view_mut().into_dyn()));
            out.push((format!("{p}.ln1.bias"), l.ln1.bias.view_mut().into_dyn()));
            push_linear_views_mut(&mut out, &format!("{p}.attn.wq"), &mut l.attn.wq);
            push_linear_views_mut(&mut out, &format!("{p}.attn.wk"), &mut l.attn.wk);
            push_linear_views_mut(&mut out, &format!("{p}.attn.wv"), &mut l.attn.wv);
            push_linear_views_mut(&mut out, &format!("{p}.attn.wo"), &mut l.attn.wo);
            out.push((format!("{p}.ln2.gain"), l.ln2.gain.view_mut().into_dyn()));
            out.push((format!("{p}.ln2.bias"), l.ln2.bias.view_mut().into_dyn()));
            push_linear_views_mut(&mut out, &format!("{p}.fc1"), &mut l.fc1);
            push_linear_views_mut(&mut out, &format!("{p}.fc2"), &mut l.fc2);
        }
        push_linear_views_mut(&mut out, "patch.attr_fc", &mut patch_branch.attr_fc);
        out.push(("patch.types.attribute".into(), patch_branch.types.attribute.view_mut().into_dyn()));
        out.push(("patch.types.patch".into(), patch_branch.types.patch.view_mut().into_dyn()));
        push_linear_views_mut(&mut out, "patch.cross.wq", &mut patch_branch.cross.wq);
        push_linear_views_mut(&mut out, "patch.cross.wk", &mut patch_branch.cross.wk);
        push_linear_views_mut(&mut out, "patch.cross.wv", &mut patch_branch.cross.wv);
        push_linear_views_mut(&mut out, "patch.cross.wo", &mut patch_branch.cross.wo);
        push_head_views_mut(&mut out, "patch.head", &mut patch_branch.head);
        if let Some(p) = &mut patch_branch.out_proj {
            push_linear_views_mut(&mut out, "patch.out_proj", p);
        }
        out
    }

    /// Elementwise `self += other` over all parameters.
    pub fn add_params(&mut self, other: &RpfModel) {
        let src = other.named_param_views();
        for ((name, mut dst), (src_name, s)) in
            self.named_param_views_mut().into_iter().zip(src)
        {
            debug_assert_eq!(name, src_name);
            dst.zip_mut_with(&s, |d, &v| *d += v);
        }
    }
}

fn push_linear_views<'a>(
    out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
    prefix: &str,
    linear: &'a Linear,
) {
    out.push((format!("{prefix}.weight"), linear.weight.view().into_dyn()));
    out.push((format!("{prefix}.bias"), linear.bias.view().into_dyn()));
}

fn push_linear_views_mut<'a>(
    out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    prefix: &str,
    linear: &'a mut Linear,
) {
    out.push((format!("{prefix}.weight"), linear.weight.view_mut().into_dyn()));
    out.push((format!("{prefix}.bias"), linear.bias.view_mut().into_dyn()));
}

fn push_head_views<'a>(
    out: &mut Vec<(String, ArrayViewD<'a, f64>)>,
    prefix: &str,
    head: &'a ResidualHead,
) {
    out.push((format!("{prefix}.ln_in.gain"), head.ln_in.gain.view().into_dyn()));
    out.push((format!("{prefix}.ln_in.bias"), head.ln_in.bias.view().into_dyn()));
    push_linear_views(out, &format!("{prefix}.w1"), &head.w1);
    push_linear_views(out, &format!("{prefix}.w2"), &head.w2);
    out.push((format!("{prefix}.ln_out.gain"), head.ln_out.gain.view().into_dyn()));
    out.push((format!("{prefix}.ln_out.bias"), head.ln_out.bias.view().into_dyn()));
}

fn push_head_views_mut<'a>(
    out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
    prefix: &str,
    head: &'a mut ResidualHead,
) {
    out.push((format!("{prefix}.ln_in.gain"), head.ln_in.gain.view_mut().into_dyn()));
    out.push((format!("{prefix}.ln_in.bias"), head.ln_in.bias.view_mut().into_dyn()));
    push_linear_views_mut(out, &format!("{prefix}.w1"), &mut head.w1);
    push_linear_views_mut(out, &format!("{prefix}.w2"), &mut head.w2);
    out.push((format!("{prefix}.ln_out.gain"), head.ln_out.gain.view_mut().into_dyn()));
    out.push((format!("{prefix}.ln_out.bias"), head.ln_out.bias.view_mut().into_dyn()));
}

// ---------------------------------------------------------------------------
// Attribute-agnostic baseline: mean-pooled CNN features through the same
// residual head, trained with a plain triplet loss, no conditioning.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub encoder: RegionEncoder,
    pub projector: Option<Linear>,
    pub head: ResidualHead,
    pub embed_dim: usize,
}

pub struct BaselineCache {
    encoder: RegionEncoderCache,
    grid: (usize, usize),
    proj: Option<crate::nn::LinearCache>,
    head: ResidualHeadCache,
    out: Array1<f64>,
    norm: f64,
}

impl BaselineModel {
    pub fn new(rng: &mut Rng, config: &ModelConfig) -> Self {
        let encoder = RegionEncoder::new(rng, config.backbone.region);
        let channels = config.backbone.region.channels;
        let projector = (channels != config.embed_dim)
            .then(|| Linear::new(rng, channels, config.embed_dim));
        BaselineModel {
            encoder,
            projector,
            head: ResidualHead::new(rng, config.embed_dim),
            embed_dim: config.embed_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        BaselineModel {
            encoder: self.encoder.zeros_like(),
            projector: self.projector.as_ref().map(Linear::zeros_like),
            head: self.head.zeros_like(),
            embed_dim: self.embed_dim,
        }
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(Array1<f64>, BaselineCache)> {
        let (map, encoder_cache) = self.encoder.forward(image)?;
        let (_, h, w) = map.dim();
        let pooled = crate::backbone::mean_pool_map(&map);
        let (head_in, proj_cache) = match &self.projector {
            Some(p) => {
                let (y, c) = p.forward_vec(&pooled)?;
                (y, Some(c))
            }
            None => (pooled, None),
        };
        let (raw, head_cache) = self.head.forward(&head_in)?;
        let (out, norm) = l2_normalize(&raw);
        Ok((
            out.clone(),
            BaselineCache {
                encoder: encoder_cache,
                grid: (h, w),
                proj: proj_cache,
                head: head_cache,
                out,
                norm,
            },
        ))
    }

    pub fn backward(&self, cache: &BaselineCache, d_out: &Array1<f64>, grads: &mut Self) {
        let d_raw = l2_normalize_backward(&cache.out, cache.norm, d_out);
        let d_head_in = self.head.backward(&cache.head, &d_raw, &mut grads.head);
        let d_pooled = match (&self.projector, &mut grads.projector) {
            (Some(p), Some(gp)) => p.backward_vec(cache.proj.as_ref().unwrap(), &d_head_in, gp),
            _ => d_head_in,
        };
        let (h, w) = cache.grid;
        let d_map = crate::backbone::mean_pool_map_backward(&d_pooled, h, w);
        self.encoder.backward(&cache.encoder, &d_map, &mut grads.encoder);
    }

    pub fn named_param_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        let BaselineModel {
            encoder,
            projector,
            head,
            embed_dim: _,
        } = self;
        for (i, b) in encoder.blocks.iter_mut().enumerate() {
            out.push((format!("encoder.block{i}.conv.weight"), b.conv.weight.view_mut().into_dyn()));
            out.push((format!("encoder.block{i}.conv.bias"), b.conv.bias.view_mut().into_dyn()));
            out.push((format!("encoder.block{i}.norm.gain"), b.norm.gain.view_mut().into_dyn()));
            out.push((format!("encoder.block{i}.norm.bias"), b.norm.bias.view_mut().into_dyn()));
        }
        if let Some(p) = projector {
            push_linear_views_mut(&mut out, "projector", p);
        }
        push_head_views_mut(&mut out, "head", head);
        out
    }

    pub fn named_param_views(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        let BaselineModel {
            encoder,
            projector,
            head,
            embed_dim: _,
        } = self;
        for (i, b) in encoder.blocks.iter().enumerate() {
            out.push((format!("encoder.block{i}.conv.weight"), b.conv.weight.view().into_dyn()));
            out.push((format!("encoder.block{i}.conv.bias"), b.conv.bias.view().into_dyn()));
            out.push((format!("encoder.block{i}.norm.gain"), b.norm.gain.view().into_dyn()));
            out.push((format!("encoder.block{i}.norm.bias"), b.norm.bias.view().into_dyn()));
        }
        if let Some(p) = projector {
            push_linear_views(&mut out, "projector", p);
        }
        push_head_views(&mut out, "head", head);
        out
    }

    pub fn add_params(&mut self, other: &BaselineModel) {
        let src = other.named_param_views();
        for ((name, mut dst), (src_name, s)) in self.named_param_views_mut().into_iter().zip(src) {
            debug_assert_eq!(name, src_name);
            dst.zip_mut_with(&s, |d, &v| *d += v);
        }
    }
}

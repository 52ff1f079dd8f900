//! Patch-aware branch: attribute-conditioned embedding of the amplified RoI.
//!
//! Patch tokens and the attribute embedding receive learned type offsets to
//! mark their modality, then a multi-head cross-attention uses the attribute
//! as the sole query over the patch keys/values. The attended vector plus the
//! mean-pooled tokens feed the shared residual-MLP head recipe, followed by
//! an optional width projection and L2 normalization.

use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize, l2_normalize_backward, softmax, softmax_backward, Linear, LinearCache,
};
use crate::region::{ResidualHead, ResidualHeadCache};
use crate::rng::Rng;
use ndarray::{s, Array1, Array2, Axis};

/// Learned modality offsets: `e_a` for the attribute token, `e_p` for patch
/// tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeEmbeddings {
    pub attribute: Array1<f64>,
    pub patch: Array1<f64>,
}

impl TypeEmbeddings {
    pub fn new(rng: &mut Rng, dim: usize) -> Self {
        TypeEmbeddings {
            attribute: crate::nn::init::normal(rng, dim, 0.02),
            patch: crate::nn::init::normal(rng, dim, 0.02),
        }
    }

    pub fn zeros_like(&self) -> Self {
        TypeEmbeddings {
            attribute: Array1::zeros(self.attribute.raw_dim()),
            patch: Array1::zeros(self.patch.raw_dim()),
        }
    }
}

/// Add type embeddings: `f_a' = affine(f_a) + e_a`, `F'_j = f_j + e_p`.
pub fn add_type_embeddings(
    attr_fc: &Linear,
    types: &TypeEmbeddings,
    f_a: &Array1<f64>,
    tokens: &Array2<f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if tokens.ncols() != types.patch.len() {
        return Err(Error::shape(
            "add_type_embeddings",
            format!(
                "token width {} != type embedding width {}",
                tokens.ncols(),
                types.patch.len()
            ),
        ));
    }
    let (projected, _) = attr_fc.forward_vec(f_a)?;
    let attr_token = projected + &types.attribute;
    let patched = tokens + &types.patch;
    Ok((attr_token, patched))
}

/// Multi-head cross-attention with the attribute token as the only query and
/// the patch tokens as keys and values; heads are concatenated and projected.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct CrossAttentionCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    q: Array1<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Array2<f64>, // (heads, n)
    concat_cache: LinearCache,
}

impl CrossAttention {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize) -> Self {
        CrossAttention {
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, dim, dim),
            wv: Linear::new(rng, dim, dim),
            wo: Linear::new(rng, dim, dim),
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        CrossAttention {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            heads: self.heads,
        }
    }

    /// Returns the attended vector `l` and the per-head attention weights
    /// `(heads, n)`.
    pub fn forward(
        &self,
        attr_token: &Array1<f64>,
        tokens: &Array2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>, CrossAttentionCache)> {
        let n = tokens.nrows();
        if n == 0 {
            return Err(Error::shape("attribute_cross_attention", "empty token sequence"));
        }
        let dim = attr_token.len();
        let d = dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (q, q_cache) = self.wq.forward_vec(attr_token)?;
        let (k, k_cache) = self.wk.forward(tokens)?;
        let (v, v_cache) = self.wv.forward(tokens)?;
        let mut concat = Array1::zeros(dim);
        let mut weights = Array2::zeros((self.heads, n));
        for h in 0..self.heads {
            let cols = h * d..(h + 1) * d;
            let qh = q.slice(s![cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let scores = kh.dot(&qh) * scale; // (n)
            let attn = softmax(&scores);
            let out_h = vh.t().dot(&attn); // (d)
            concat.slice_mut(s![cols]).assign(&out_h);
            weights.row_mut(h).assign(&attn);
        }
        let (out, concat_cache) = self.wo.forward_vec(&concat)?;
        Ok((
            out,
            weights.clone(),
            CrossAttentionCache {
                q_cache,
                k_cache,
                v_cache,
                q,
                k,
                v,
                weights,
                concat_cache,
            },
        ))
    }

    /// Backward; returns gradients w.r.t. the attribute token and the patch
    /// tokens.
    pub fn backward(
        &self,
        cache: &CrossAttentionCache,
        dy: &Array1<f64>,
        grads: &mut Self,
    ) -> (Array1<f64>, Array2<f64>) {
        let (n, dim) = cache.k.dim();
        let d = dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let d_concat = self.wo.backward_vec(&cache.concat_cache, dy, &mut grads.wo);
        let mut dq = Array1::zeros(dim);
        let mut dk = Array2::zeros((n, dim));
        let mut dv = Array2::zeros((n, dim));
        for h in 0..self.heads {
            let cols = h * d..(h + 1) * d;
            let d_out_h = d_concat.slice(s![cols.clone()]);
            let attn = cache.weights.row(h).to_owned();
            let kh = cache.k.slice(s![.., cols.clone()]);
            let vh = cache.v.slice(s![.., cols.clone()]);
            let qh = cache.q.slice(s![cols.clone()]);

            // out_h = vh^T attn
            let d_attn = vh.dot(&d_out_h); // (n)
            for i in 0..n {
                let mut row = dv.slice_mut(s![i, cols.clone()]);
                row += &(&d_out_h * attn[i]);
            }
            let mut d_scores = softmax_backward(&attn, &d_attn);
            d_scores *= scale;
            dq.slice_mut(s![cols.clone()]).assign(&kh.t().dot(&d_scores));
            for i in 0..n {
                let mut row = dk.slice_mut(s![i, cols.clone()]);
                row.assign(&(&qh * d_scores[i]));
            }
        }
        let d_attr = self.wq.backward_vec(&cache.q_cache, &dq, &mut grads.wq);
        let mut d_tokens = self.wk.backward(&cache.k_cache, &dk, &mut grads.wk);
        d_tokens += &self.wv.backward(&cache.v_cache, &dv, &mut grads.wv);
        (d_attr, d_tokens)
    }
}

/// Full patch branch after the encoder: type embeddings, cross-attention,
/// mean-pool residual, shared head recipe, optional width projection,
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBranch {
    pub attr_fc: Linear, // c_a -> hidden
    pub types: TypeEmbeddings,
    pub cross: CrossAttention,
    pub head: ResidualHead,
    pub out_proj: Option<Linear>, // hidden -> c_o when they differ
}

pub struct PatchBranchCache {
    attr_fc: LinearCache,
    tokens_typed: Array2<f64>,
    cross: CrossAttentionCache,
    head: ResidualHeadCache,
    out_proj: Option<LinearCache>,
    norm: f64,
    out: Array1<f64>,
}

impl PatchBranch {
    pub fn new(rng: &mut Rng, attr_dim: usize, hidden: usize, heads: usize, out_dim: usize) -> Self {
        PatchBranch {
            attr_fc: Linear::new(rng, attr_dim, hidden),
            types: TypeEmbeddings::new(rng, hidden),
            cross: CrossAttention::new(rng, hidden, heads),
            head: ResidualHead::new(rng, hidden),
            out_proj: (hidden != out_dim).then(|| Linear::new(rng, hidden, out_dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PatchBranch {
            attr_fc: self.attr_fc.zeros_like(),
            types: self.types.zeros_like(),
            cross: self.cross.zeros_like(),
            head: self.head.zeros_like(),
            out_proj: self.out_proj.as_ref().map(Linear::zeros_like),
        }
    }

    /// Embed encoded patch tokens under an attribute. Returns the normalized
    /// embedding `p` and the per-head attention weights `(heads, n)`.
    pub fn forward(
        &self,
        f_a: &Array1<f64>,
        tokens: &Array2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>, PatchBranchCache)> {
        let (projected, attr_fc_cache) = self.attr_fc.forward_vec(f_a)?;
        let attr_token = projected + &self.types.attribute;
        let tokens_typed = tokens + &self.types.patch;
        let (attended, weights, cross_cache) = self.cross.forward(&attr_token, &tokens_typed)?;
        let mean = tokens_typed.mean_axis(Axis(0)).expect("n >= 1");
        let enriched = &attended + &mean;
        let (head_out, head_cache) = self.head.forward(&enriched)?;
        let (raw, out_proj_cache) = match &self.out_proj {
            Some(p) => {
                let (y, c) = p.forward_vec(&head_out)?;
                (y, Some(c))
            }
            None => (head_out, None),
        };
        let (out, norm) = l2_normalize(&raw);
        Ok((
            out.clone(),
            weights.clone(),
            PatchBranchCache {
                attr_fc: attr_fc_cache,
                tokens_typed,
                cross: cross_cache,
                head: head_cache,
                out_proj: out_proj_cache,
                norm,
                out,
            },
        ))
    }

    /// Backward; returns gradients w.r.t. the attribute embedding and the
    /// encoder tokens.
    pub fn backward(
        &self,
        cache: &PatchBranchCache,
        d_out: &Array1<f64>,
        grads: &mut Self,
    ) -> (Array1<f64>, Array2<f64>) {
        let d_raw = l2_normalize_backward(&cache.out, cache.norm, d_out);
        let d_head_out = match (&self.out_proj, &mut grads.out_proj) {
            (Some(p), Some(gp)) => {
                p.backward_vec(cache.out_proj.as_ref().expect("proj cache"), &d_raw, gp)
            }
            _ => d_raw,
        };
        let d_enriched = self.head.backward(&cache.head, &d_head_out, &mut grads.head);
        // enriched = attended + mean(tokens_typed)
        let n = cache.tokens_typed.nrows() as f64;
        let (d_attr_token, mut d_tokens_typed) =
            self.cross.backward(&cache.cross, &d_enriched, &mut grads.cross);
        for mut row in d_tokens_typed.outer_iter_mut() {
            row += &(&d_enriched / n);
        }
        grads.types.attribute += &d_attr_token;
        grads.types.patch += &d_tokens_typed.sum_axis(Axis(0));
        let d_f_a = self
            .attr_fc
            .backward_vec(&cache.attr_fc, &d_attr_token, &mut grads.attr_fc);
        (d_f_a, d_tokens_typed)
    }

    /// Per-head attention weights from a cached pass.
    pub fn attention_weights(cache: &PatchBranchCache) -> Array2<f64> {
        cache.cross.weights.clone()
    }
}

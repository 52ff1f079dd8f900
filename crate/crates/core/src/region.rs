//! Region-aware branch: attribute-guided spatial attention over the encoder
//! feature map, disentangling it into complementary foreground and background
//! embeddings.
//!
//! Given a feature map `x` and an attribute embedding, both are projected
//! into a joint space (1x1 conv / affine + tanh); position-wise dot products
//! softmax into the foreground map `alpha`, whose normalized inverse is the
//! background map. Attention-weighted sums of `x` pass through one shared
//! residual MLP head, and both outputs are L2-normalized.

use crate::backbone::SpatialFeatureMap;
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize, l2_normalize_backward, relu, relu_backward, softmax, softmax_backward,
    tanh_backward, tanh_forward, LayerNorm, LayerNormCache, Linear, LinearCache,
};
use crate::rng::Rng;
use ndarray::{Array1, Array2, Axis};

/// Foreground map `alpha` and background map over the attention grid; each
/// sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPair {
    pub foreground: Array2<f64>,
    pub background: Array2<f64>,
}

impl AttentionPair {
    /// Check normalization and that the background peaks where the
    /// foreground bottoms out (the inversion is order-reversing).
    pub fn validate(&self) -> Result<()> {
        for (name, map) in [("foreground", &self.foreground), ("background", &self.background)] {
            let sum = map.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!("{name} attention sums to {sum}")));
            }
            if map.iter().any(|&v| v < 0.0) {
                return Err(Error::Numeric(format!("{name} attention has negative entries")));
            }
        }
        let argmax_bg = argext(&self.background, |a, b| a > b);
        let min_fg = self.foreground.iter().copied().fold(f64::INFINITY, f64::min);
        if (self.foreground[argmax_bg] - min_fg).abs() > 1e-12 {
            return Err(Error::Numeric(
                "background argmax is not a foreground argmin".into(),
            ));
        }
        Ok(())
    }
}

fn argext(map: &Array2<f64>, better: impl Fn(f64, f64) -> bool) -> (usize, usize) {
    let mut best = (0, 0);
    for ((i, j), &v) in map.indexed_iter() {
        if better(v, map[best]) {
            best = (i, j);
        }
    }
    best
}

/// Joint latent projection of feature map and attribute embedding: a 1x1
/// convolution (a per-position affine over channels) and an affine, each
/// followed by tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct JointProjection {
    pub map_proj: Linear,  // c -> c_m, applied per spatial position
    pub attr_proj: Linear, // c_a -> c_m
}

impl JointProjection {
    pub fn new(rng: &mut Rng, channels: usize, attr_dim: usize, joint_dim: usize) -> Self {
        JointProjection {
            map_proj: Linear::new(rng, channels, joint_dim),
            attr_proj: Linear::new(rng, attr_dim, joint_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        JointProjection {
            map_proj: self.map_proj.zeros_like(),
            attr_proj: self.attr_proj.zeros_like(),
        }
    }
}

/// Flatten `(c, h, w)` into spatial rows `(h*w, c)`.
fn spatial_rows(x: &SpatialFeatureMap) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut rows = Array2::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                rows[(y * w + xx, ch)] = x[(ch, y, xx)];
            }
        }
    }
    rows
}

fn rows_to_map(rows: &Array2<f64>, h: usize, w: usize) -> SpatialFeatureMap {
    let c = rows.ncols();
    let mut out = ndarray::Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch, y, xx)] = rows[(y * w + xx, ch)];
            }
        }
    }
    out
}

/// Project a feature map and attribute vector into the joint latent space.
/// Returns `x_c` of shape `(c_m, h*w)` and `f_ac` of shape `(c_m)`, both
/// tanh-bounded.
pub fn project_joint(
    joint: &JointProjection,
    x: &SpatialFeatureMap,
    f_a: &Array1<f64>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let rows = spatial_rows(x);
    let (pre_map, _) = joint.map_proj.forward(&rows)?;
    let x_c_rows = tanh_forward(&pre_map);
    let (pre_attr, _) = joint.attr_proj.forward_vec(f_a)?;
    let f_ac = tanh_forward(&pre_attr);
    Ok((x_c_rows.t().to_owned(), f_ac))
}

/// Foreground attention: softmax over the spatial positions of the dot
/// products between `f_ac` and each column of `x_c`.
pub fn foreground_attention(
    x_c: &Array2<f64>,
    f_ac: &Array1<f64>,
    grid: (usize, usize),
) -> Result<Array2<f64>> {
    let (c_m, positions) = x_c.dim();
    if c_m != f_ac.len() {
        return Err(Error::shape(
            "foreground_attention",
            format!("joint widths differ: {c_m} vs {}", f_ac.len()),
        ));
    }
    if grid.0 * grid.1 != positions {
        return Err(Error::shape(
            "foreground_attention",
            format!("grid {}x{} != {positions} positions", grid.0, grid.1),
        ));
    }
    let logits = x_c.t().dot(f_ac);
    let weights = softmax(&logits);
    Ok(weights
        .into_shape_with_order(grid)
        .expect("grid matches positions"))
}

/// Background attention: normalized inverse of the foreground map,
/// `(1 - alpha) / sum(1 - alpha)`. Undefined on a single-cell grid, where the
/// denominator vanishes.
pub fn background_attention(alpha: &Array2<f64>) -> Result<Array2<f64>> {
    if alpha.len() < 2 {
        return Err(Error::Numeric(
            "background undefined on 1-cell grid".into(),
        ));
    }
    let inverted = alpha.mapv(|v| 1.0 - v);
    let denom = inverted.sum();
    Ok(inverted / denom)
}

/// Backward of [`background_attention`]: gradient w.r.t. `alpha`.
pub fn background_attention_backward(
    alpha: &Array2<f64>,
    background: &Array2<f64>,
    d_background: &Array2<f64>,
) -> Array2<f64> {
    let denom = alpha.mapv(|v| 1.0 - v).sum();
    let weighted = (d_background * background).sum();
    d_background.mapv(|v| (weighted - v) / denom)
}

/// Attention-weighted sum of the feature map over spatial positions.
pub fn attend_pool(x: &SpatialFeatureMap, weights: &Array2<f64>) -> Result<Array1<f64>> {
    let (c, h, w) = x.dim();
    if weights.dim() != (h, w) {
        return Err(Error::shape(
            "attend_pool",
            format!("weights {:?} != grid ({h}, {w})", weights.dim()),
        ));
    }
    let mut pooled = Array1::zeros(c);
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        pooled[ch] = (&plane * weights).sum();
    }
    Ok(pooled)
}

/// Backward of [`attend_pool`]: gradients w.r.t. the feature map and weights.
pub fn attend_pool_backward(
    x: &SpatialFeatureMap,
    weights: &Array2<f64>,
    d_pooled: &Array1<f64>,
) -> (SpatialFeatureMap, Array2<f64>) {
    let (c, h, w) = x.dim();
    let mut dx = ndarray::Array3::zeros((c, h, w));
    let mut dw = Array2::zeros((h, w));
    for ch in 0..c {
        let plane = x.index_axis(Axis(0), ch);
        dx.index_axis_mut(Axis(0), ch)
            .assign(&(weights * d_pooled[ch]));
        dw += &(&plane * d_pooled[ch]);
    }
    (dx, dw)
}

/// Residual MLP head: `LN -> affine -> relu -> affine -> +input -> LN`.
/// Shared verbatim by the region branch (both attention paths) and, at patch
/// width, by the patch branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualHead {
    pub ln_in: LayerNorm,
    pub w1: Linear,
    pub w2: Linear,
    pub ln_out: LayerNorm,
}

pub struct ResidualHeadCache {
    ln_in: LayerNormCache,
    w1: LinearCache,
    pre_relu: Array1<f64>,
    w2: LinearCache,
    ln_out: LayerNormCache,
}

impl ResidualHead {
    pub fn new(rng: &mut Rng, dim: usize) -> Self {
        ResidualHead {
            ln_in: LayerNorm::new(dim),
            w1: Linear::new(rng, dim, dim),
            w2: Linear::new(rng, dim, dim),
            ln_out: LayerNorm::new(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ResidualHead {
            ln_in: self.ln_in.zeros_like(),
            w1: self.w1.zeros_like(),
            w2: self.w2.zeros_like(),
            ln_out: self.ln_out.zeros_like(),
        }
    }

    pub fn dim(&self) -> usize {
        self.ln_in.dim()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<(Array1<f64>, ResidualHeadCache)> {
        let (normed, ln_in) = self.ln_in.forward_vec(x)?;
        let (pre_relu, w1) = self.w1.forward_vec(&normed)?;
        let hidden = relu(&pre_relu);
        let (projected, w2) = self.w2.forward_vec(&hidden)?;
        let residual = &projected + x;
        let (out, ln_out) = self.ln_out.forward_vec(&residual)?;
        Ok((
            out,
            ResidualHeadCache {
                ln_in,
                w1,
                pre_relu,
                w2,
                ln_out,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ResidualHeadCache,
        dy: &Array1<f64>,
        grads: &mut Self,
    ) -> Array1<f64> {
        let d_residual = self.ln_out.backward_vec(&cache.ln_out, dy, &mut grads.ln_out);
        let d_hidden = self.w2.backward_vec(&cache.w2, &d_residual, &mut grads.w2);
        let d_pre = relu_backward(&cache.pre_relu, &d_hidden);
        let d_normed = self.w1.backward_vec(&cache.w1, &d_pre, &mut grads.w1);
        let mut dx = self.ln_in.backward_vec(&cache.ln_in, &d_normed, &mut grads.ln_in);
        dx += &d_residual;
        dx
    }
}

/// Region branch head-end: joint projection, attention, pooling, an optional
/// channel projector (when encoder channels differ from the embedding width)
/// and the shared residual head.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBranch {
    pub joint: JointProjection,
    pub projector: Option<Linear>, // c -> c_o when c != c_o
    pub head: ResidualHead,
}

/// Foreground and background embeddings plus the attention maps of one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionOutput {
    pub foreground: Array1<f64>,
    pub background: Array1<f64>,
    pub attention: AttentionPair,
}

pub struct RegionBranchCache {
    x: SpatialFeatureMap,
    map_cache: LinearCache,
    x_c_rows: Array2<f64>,
    attr_cache: LinearCache,
    f_ac: Array1<f64>,
    alpha_flat: Array1<f64>,
    alpha: Array2<f64>,
    background: Array2<f64>,
    proj_fg: Option<LinearCache>,
    proj_bg: Option<LinearCache>,
    head_fg: ResidualHeadCache,
    head_bg: ResidualHeadCache,
    norm_fg: f64,
    norm_bg: f64,
    out_fg: Array1<f64>,
    out_bg: Array1<f64>,
}

impl RegionBranch {
    pub fn new(
        rng: &mut Rng,
        channels: usize,
        attr_dim: usize,
        joint_dim: usize,
        out_dim: usize,
    ) -> Self {
        let projector = (channels != out_dim).then(|| Linear::new(rng, channels, out_dim));
        RegionBranch {
            joint: JointProjection::new(rng, channels, attr_dim, joint_dim),
            projector,
            head: ResidualHead::new(rng, out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        RegionBranch {
            joint: self.joint.zeros_like(),
            projector: self.projector.as_ref().map(Linear::zeros_like),
            head: self.head.zeros_like(),
        }
    }

    pub fn forward(
        &self,
        x: &SpatialFeatureMap,
        f_a: &Array1<f64>,
    ) -> Result<(RegionOutput, RegionBranchCache)> {
        let (_, h, w) = x.dim();
        let rows = spatial_rows(x);
        let (pre_map, map_cache) = self.joint.map_proj.forward(&rows)?;
        let x_c_rows = tanh_forward(&pre_map);
        let (pre_attr, attr_cache) = self.joint.attr_proj.forward_vec(f_a)?;
        let f_ac = tanh_forward(&pre_attr);

        let logits = x_c_rows.dot(&f_ac);
        let alpha_flat = softmax(&logits);
        let alpha = alpha_flat
            .clone()
            .into_shape_with_order((h, w))
            .expect("grid shape");
        let background = background_attention(&alpha)?;

        let pooled_fg = attend_pool(x, &alpha)?;
        let pooled_bg = attend_pool(x, &background)?;

        let (head_in_fg, proj_fg) = match &self.projector {
            Some(p) => {
                let (y, c) = p.forward_vec(&pooled_fg)?;
                (y, Some(c))
            }
            None => (pooled_fg.clone(), None),
        };
        let (head_in_bg, proj_bg) = match &self.projector {
            Some(p) => {
                let (y, c) = p.forward_vec(&pooled_bg)?;
                (y, Some(c))
            }
            None => (pooled_bg.clone(), None),
        };

        let (raw_fg, head_fg) = self.head.forward(&head_in_fg)?;
        let (raw_bg, head_bg) = self.head.forward(&head_in_bg)?;
        let (out_fg, norm_fg) = l2_normalize(&raw_fg);
        let (out_bg, norm_bg) = l2_normalize(&raw_bg);

        let output = RegionOutput {
            foreground: out_fg.clone(),
            background: out_bg.clone(),
            attention: AttentionPair {
                foreground: alpha.clone(),
                background: background.clone(),
            },
        };
        Ok((
            output,
            RegionBranchCache {
                x: x.clone(),
                map_cache,
                x_c_rows,
                attr_cache,
                f_ac,
                alpha_flat,
                alpha,
                background,
                proj_fg,
                proj_bg,
                head_fg,
                head_bg,
                norm_fg,
                norm_bg,
                out_fg,
                out_bg,
            },
        ))
    }

    /// Backward from embedding gradients. Returns gradients w.r.t. the
    /// feature map and the attribute embedding. When `through_attention` is
    /// false (stage-2 freezing) only head/projector parameters receive
    /// gradients and the returned input gradients are zero.
    pub fn backward(
        &self,
        cache: &RegionBranchCache,
        d_fg: &Array1<f64>,
        d_bg: &Array1<f64>,
        through_attention: bool,
        grads: &mut Self,
    ) -> (SpatialFeatureMap, Array1<f64>) {
        let d_raw_fg = l2_normalize_backward(&cache.out_fg, cache.norm_fg, d_fg);
        let d_raw_bg = l2_normalize_backward(&cache.out_bg, cache.norm_bg, d_bg);
        // same head object serves both paths; grads accumulate
        let d_head_in_fg = self.head.backward(&cache.head_fg, &d_raw_fg, &mut grads.head);
        let d_head_in_bg = self.head.backward(&cache.head_bg, &d_raw_bg, &mut grads.head);

        let (d_pooled_fg, d_pooled_bg) = match (&self.projector, &mut grads.projector) {
            (Some(p), Some(gp)) => (
                p.backward_vec(cache.proj_fg.as_ref().expect("projector cache"), &d_head_in_fg, gp),
                p.backward_vec(cache.proj_bg.as_ref().expect("projector cache"), &d_head_in_bg, gp),
            ),
            _ => (d_head_in_fg, d_head_in_bg),
        };

        if !through_attention {
            let (c, h, w) = cache.x.dim();
            return (ndarray::Array3::zeros((c, h, w)), Array1::zeros(cache.f_ac.len()));
        }

        let (mut dx, d_alpha_from_fg) = attend_pool_backward(&cache.x, &cache.alpha, &d_pooled_fg);
        let (dx_bg, d_background) = attend_pool_backward(&cache.x, &cache.background, &d_pooled_bg);
        dx += &dx_bg;

        let mut d_alpha = d_alpha_from_fg;
        d_alpha += &background_attention_backward(&cache.alpha, &cache.background, &d_background);

        let d_alpha_flat = d_alpha
            .into_shape_with_order(cache.alpha_flat.len())
            .expect("grid shape");
        let d_logits = softmax_backward(&cache.alpha_flat, &d_alpha_flat);

        // logits = x_c_rows . f_ac
        let d_x_c_rows = outer(&d_logits, &cache.f_ac);
        let d_f_ac = cache.x_c_rows.t().dot(&d_logits);

        let d_pre_map = tanh_backward(&cache.x_c_rows, &d_x_c_rows);
        let d_rows = self
            .joint
            .map_proj
            .backward(&cache.map_cache, &d_pre_map, &mut grads.joint.map_proj);
        let (h, w) = cache.alpha.dim();
        dx += &rows_to_map(&d_rows, h, w);

        let d_pre_attr = tanh_backward(&cache.f_ac, &d_f_ac);
        let d_f_a =
            self.joint
                .attr_proj
                .backward_vec(&cache.attr_cache, &d_pre_attr, &mut grads.joint.attr_proj);
        (dx, d_f_a)
    }

    /// The attention maps of the cached pass.
    pub fn attention(cache: &RegionBranchCache) -> AttentionPair {
        AttentionPair {
            foreground: cache.alpha.clone(),
            background: cache.background.clone(),
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, &av) in a.iter().enumerate() {
        for (j, &bv) in b.iter().enumerate() {
            out[(i, j)] = av * bv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_fn_grad, GradCheckCfg};
    use crate::nn::init::normal;
    use crate::rng::rng_from_seed;
    use ndarray::array;

    #[test]
    fn project_joint_zero_inputs_zero_outputs() {
        let mut rng = rng_from_seed(0);
        let joint = JointProjection::new(&mut rng, 4, 3, 5);
        // zero biases by construction; zero inputs -> tanh(0) = 0
        let x = ndarray::Array3::zeros((4, 2, 2));
        let f_a = Array1::zeros(3);
        let (x_c, f_ac) = project_joint(&joint, &x, &f_a).unwrap();
        assert!(x_c.iter().all(|&v| v == 0.0));
        assert!(f_ac.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_joint_outputs_are_tanh_bounded() {
        let mut rng = rng_from_seed(1);
        let joint = JointProjection::new(&mut rng, 4, 3, 5);
        let x = normal(&mut rng, (4, 3, 3), 3.0);
        let f_a = normal(&mut rng, 3, 3.0);
        let (x_c, f_ac) = project_joint(&joint, &x, &f_a).unwrap();
        assert!(x_c.iter().all(|&v| v.abs() < 1.0));
        assert!(f_ac.iter().all(|&v| v.abs() < 1.0));
        // f64 tanh saturates to exactly 1.0 for huge inputs; still bounded
        let huge = normal(&mut rng, (4, 3, 3), 1e6);
        let (x_c, _) = project_joint(&joint, &huge, &f_a).unwrap();
        assert!(x_c.iter().all(|&v| v.abs() <= 1.0));
    }

    /// Scalar re-implementation of conv1x1 + tanh as an independent oracle.
    #[test]
    fn project_joint_matches_scalar_oracle() {
        let mut rng = rng_from_seed(2);
        let joint = JointProjection::new(&mut rng, 4, 3, 5);
        let x = normal(&mut rng, (4, 2, 3), 1.0);
        let f_a = normal(&mut rng, 3, 1.0);
        let (x_c, f_ac) = project_joint(&joint, &x, &f_a).unwrap();

        let (c, h, w) = x.dim();
        for pos in 0..h * w {
            let (y, xx) = (pos / w, pos % w);
            for m in 0..5 {
                let mut acc = joint.map_proj.bias[m];
                for ch in 0..c {
                    acc += joint.map_proj.weight[(m, ch)] * x[(ch, y, xx)];
                }
                let expected = acc.tanh();
                assert!((x_c[(m, pos)] - expected).abs() < 1e-6);
            }
        }
        for m in 0..5 {
            let mut acc = joint.attr_proj.bias[m];
            for j in 0..3 {
                acc += joint.attr_proj.weight[(m, j)] * f_a[j];
            }
            assert!((f_ac[m] - acc.tanh()).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_positions_give_uniform_attention() {
        // identical columns -> identical logits -> uniform softmax
        let x_c = Array2::from_elem((3, 6), 0.4);
        let f_ac = array![0.1, -0.2, 0.3];
        let alpha = foreground_attention(&x_c, &f_ac, (2, 3)).unwrap();
        for &v in alpha.iter() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_closed_form_two_cells() {
        // logits (0, ln 3) on a 1x2 grid -> (0.25, 0.75)
        let x_c = array![[0.0, 3.0f64.ln()]];
        let f_ac = array![1.0];
        let alpha = foreground_attention(&x_c, &f_ac, (1, 2)).unwrap();
        assert!((alpha[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((alpha[(0, 1)] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn background_inverts_and_normalizes() {
        let alpha = array![[0.7, 0.2, 0.1]];
        let bg = background_attention(&alpha).unwrap();
        let expected = array![[0.15, 0.40, 0.45]];
        for (a, b) in bg.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn background_uniform_stays_uniform() {
        let alpha = Array2::from_elem((2, 2), 0.25);
        let bg = background_attention(&alpha).unwrap();
        for &v in bg.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn background_errors_on_single_cell() {
        let alpha = Array2::from_elem((1, 1), 1.0);
        let err = background_attention(&alpha).unwrap_err();
        assert!(err.to_string().contains("1-cell"));
    }

    #[test]
    fn attend_pool_one_hot_selects_position() {
        let mut rng = rng_from_seed(3);
        let x = normal(&mut rng, (5, 2, 2), 1.0);
        let mut weights = Array2::zeros((2, 2));
        weights[(1, 0)] = 1.0;
        let pooled = attend_pool(&x, &weights).unwrap();
        for ch in 0..5 {
            assert!((pooled[ch] - x[(ch, 1, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_pool_uniform_is_mean() {
        let mut rng = rng_from_seed(4);
        let x = normal(&mut rng, (3, 2, 2), 1.0);
        let weights = Array2::from_elem((2, 2), 0.25);
        let pooled = attend_pool(&x, &weights).unwrap();
        let mean = crate::backbone::mean_pool_map(&x);
        for ch in 0..3 {
            assert!((pooled[ch] - mean[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_pool_matches_loop_oracle() {
        let mut rng = rng_from_seed(5);
        let x = normal(&mut rng, (4, 3, 2), 1.0);
        let mut weights: Array2<f64> = normal(&mut rng, (3, 2), 1.0).mapv(f64::abs);
        let sum = weights.sum();
        weights /= sum;
        let pooled = attend_pool(&x, &weights).unwrap();
        for ch in 0..4 {
            let mut acc = 0.0;
            for y in 0..3 {
                for xx in 0..2 {
                    acc += weights[(y, xx)] * x[(ch, y, xx)];
                }
            }
            assert!((pooled[ch] - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn head_output_is_layer_normed() {
        let mut rng = rng_from_seed(6);
        let head = ResidualHead::new(&mut rng, 8);
        let x = normal(&mut rng, 8, 1.0);
        let (y, _) = head.forward(&x).unwrap();
        let mean = y.sum() / 8.0;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn head_matches_scalar_oracle() {
        let mut rng = rng_from_seed(7);
        let head = ResidualHead::new(&mut rng, 4);
        let x = normal(&mut rng, 4, 1.0);
        let (y, _) = head.forward(&x).unwrap();

        // independent scalar re-implementation of LN -> W1 -> relu -> W2 -> +x -> LN
        let ln = |v: &Vec<f64>, gain: &Array1<f64>, bias: &Array1<f64>| -> Vec<f64> {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + 1e-5).sqrt();
            v.iter()
                .enumerate()
                .map(|(i, x)| (x - mean) * istd * gain[i] + bias[i])
                .collect()
        };
        let matvec = |w: &Array2<f64>, b: &Array1<f64>, v: &Vec<f64>| -> Vec<f64> {
            (0..w.nrows())
                .map(|i| b[i] + (0..w.ncols()).map(|j| w[(i, j)] * v[j]).sum::<f64>())
                .collect()
        };
        let x_vec: Vec<f64> = x.to_vec();
        let normed = ln(&x_vec, &head.ln_in.gain, &head.ln_in.bias);
        let hidden: Vec<f64> = matvec(&head.w1.weight, &head.w1.bias, &normed)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let projected = matvec(&head.w2.weight, &head.w2.bias, &hidden);
        let residual: Vec<f64> = projected.iter().zip(&x_vec).map(|(a, b)| a + b).collect();
        let expected = ln(&residual, &head.ln_out.gain, &head.ln_out.bias);
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn tiny_branch(rng: &mut crate::rng::Rng) -> RegionBranch {
        RegionBranch::new(rng, 6, 4, 5, 6)
    }

    #[test]
    fn branch_outputs_are_unit_norm_and_attention_valid() {
        let mut rng = rng_from_seed(8);
        let branch = tiny_branch(&mut rng);
        let x = normal(&mut rng, (6, 3, 3), 1.0);
        let f_a = normal(&mut rng, 4, 1.0);
        let (out, _) = branch.forward(&x, &f_a).unwrap();
        assert!((out.foreground.dot(&out.foreground) - 1.0).abs() < 1e-6);
        assert!((out.background.dot(&out.background) - 1.0).abs() < 1e-6);
        out.attention.validate().unwrap();
    }

    #[test]
    fn branch_attention_matches_component_composition() {
        let mut rng = rng_from_seed(9);
        let branch = tiny_branch(&mut rng);
        let x = normal(&mut rng, (6, 2, 4), 1.0);
        let f_a = normal(&mut rng, 4, 1.0);
        let (out, _) = branch.forward(&x, &f_a).unwrap();
        let (x_c, f_ac) = project_joint(&branch.joint, &x, &f_a).unwrap();
        let alpha = foreground_attention(&x_c, &f_ac, (2, 4)).unwrap();
        let diff = (&out.attention.foreground - &alpha)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-9);
    }

    #[test]
    fn complementarity_identity_holds() {
        // alpha + sum(1 - alpha) * background == 1 elementwise
        let mut rng = rng_from_seed(10);
        let branch = tiny_branch(&mut rng);
        let x = normal(&mut rng, (6, 3, 3), 1.0);
        let f_a = normal(&mut rng, 4, 1.0);
        let (out, _) = branch.forward(&x, &f_a).unwrap();
        let alpha = &out.attention.foreground;
        let s = alpha.mapv(|v| 1.0 - v).sum();
        let recon = alpha + &(out.attention.background.mapv(|v| v * s));
        for &v in recon.iter() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(11);
        let branch = tiny_branch(&mut rng);
        let x = normal(&mut rng, (6, 2, 2), 0.8);
        let f_a = normal(&mut rng, 4, 0.8);
        let probe_fg = normal(&mut rng, 6, 1.0);
        let probe_bg = normal(&mut rng, 6, 1.0);

        // check gradients w.r.t. the inputs (x, f_a); parameter gradients of
        // the shared pieces are covered by their own op-level checks
        let mut x0: Vec<f64> = x.iter().copied().collect();
        x0.extend(f_a.iter());
        let f = |v: &[f64]| {
            let x = ndarray::Array3::from_shape_vec((6, 2, 2), v[..24].to_vec()).unwrap();
            let f_a = Array1::from(v[24..].to_vec());
            let (out, _) = branch.forward(&x, &f_a).unwrap();
            out.foreground.dot(&probe_fg) + out.background.dot(&probe_bg)
        };
        let (_, cache) = branch.forward(&x, &f_a).unwrap();
        let mut grads = branch.zeros_like();
        let (dx, df_a) = branch.backward(&cache, &probe_fg, &probe_bg, true, &mut grads);
        let mut analytic: Vec<f64> = dx.iter().copied().collect();
        analytic.extend(df_a.iter());

        let err = check_fn_grad(&f, &x0, &analytic, &GradCheckCfg::default());
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn frozen_backward_skips_attention_path() {
        let mut rng = rng_from_seed(12);
        let branch = tiny_branch(&mut rng);
        let x = normal(&mut rng, (6, 2, 2), 0.8);
        let f_a = normal(&mut rng, 4, 0.8);
        let (_, cache) = branch.forward(&x, &f_a).unwrap();
        let mut grads = branch.zeros_like();
        let d = Array1::from_elem(6, 0.3);
        let (dx, df_a) = branch.backward(&cache, &d, &d, false, &mut grads);
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(df_a.iter().all(|&v| v == 0.0));
        // joint projection untouched, head trained
        assert!(grads.joint.map_proj.weight.iter().all(|&v| v == 0.0));
        assert!(grads.head.w1.weight.iter().any(|&v| v != 0.0));
    }
}

//! Region-of-interest extraction: turn a foreground attention map into an
//! amplified crop of the original image for the patch branch.
//!
//! Grid cells at or above the uniform level `1 / (h*w)` are marked, their
//! tight bounding box is scaled to pixel coordinates, padded, clamped, and
//! grown to a minimum area. The crop itself is plain bilinear resampling and
//! carries no gradient; the two branches are only coupled through the losses.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiParams {
    /// Fraction of the box extent added to each side.
    pub pad_frac: f64,
    /// Minimum box area as a fraction of the image area.
    pub min_box_frac: f64,
    /// Cells are marked when `alpha >= threshold_mult / (h*w)`. 1.0 marks
    /// above-uniform cells; lowering it never shrinks the box.
    pub threshold_mult: f64,
}

impl Default for RoiParams {
    fn default() -> Self {
        RoiParams {
            pad_frac: 0.10,
            min_box_frac: 0.05,
            threshold_mult: 1.0,
        }
    }
}

/// Pixel crop window, inclusive-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub source_h: usize,
    pub source_w: usize,
}

impl CropBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn validate(&self, min_box_frac: f64) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > self.source_w || self.y1 > self.source_h
        {
            return Err(Error::Numeric(format!("degenerate crop box {self:?}")));
        }
        let area = (self.width() * self.height()) as f64;
        let min_area = min_box_frac * (self.source_h * self.source_w) as f64;
        if area + 1e-9 < min_area {
            return Err(Error::Numeric(format!(
                "crop box area {area} below minimum {min_area}"
            )));
        }
        Ok(())
    }
}

/// Grow `[lo, hi)` symmetrically to at least `target` within `[0, limit)`.
fn grow_interval(lo: usize, hi: usize, target: usize, limit: usize) -> (usize, usize) {
    let target = target.min(limit);
    let current = hi - lo;
    if current >= target {
        return (lo, hi);
    }
    let need = target - current;
    let left = need / 2;
    let mut new_lo = lo.saturating_sub(left);
    let mut new_hi = (hi + (need - (lo - new_lo))).min(limit);
    // spill leftover growth to the other side at the border
    if new_hi - new_lo < target {
        new_lo = new_hi.saturating_sub(target);
    }
    let _ = &mut new_hi;
    (new_lo, new_hi)
}

/// Map an attention map to the pixel crop box of its above-threshold cells.
/// The mask can never be empty: the max of a distribution is at least its
/// mean, so at `threshold_mult <= 1` at least one cell is marked.
pub fn attention_to_bbox(
    alpha: &Array2<f64>,
    image_size: (usize, usize),
    params: &RoiParams,
) -> CropBox {
    let (grid_h, grid_w) = alpha.dim();
    let (img_h, img_w) = image_size;
    let threshold = params.threshold_mult / (grid_h * grid_w) as f64;

    let mut gy0 = usize::MAX;
    let mut gy1 = 0usize;
    let mut gx0 = usize::MAX;
    let mut gx1 = 0usize;
    for ((gy, gx), &v) in alpha.indexed_iter() {
        if v >= threshold {
            gy0 = gy0.min(gy);
            gy1 = gy1.max(gy);
            gx0 = gx0.min(gx);
            gx1 = gx1.max(gx);
        }
    }
    if gy0 == usize::MAX {
        // only reachable with threshold_mult > 1; fall back to the peak cell
        let mut best = (0, 0);
        for (idx, &v) in alpha.indexed_iter() {
            if v > alpha[best] {
                best = idx;
            }
        }
        (gy0, gx0) = best;
        (gy1, gx1) = best;
    }

    // grid -> pixel by linear scaling
    let sy = img_h as f64 / grid_h as f64;
    let sx = img_w as f64 / grid_w as f64;
    let mut y0 = gy0 as f64 * sy;
    let mut y1 = (gy1 + 1) as f64 * sy;
    let mut x0 = gx0 as f64 * sx;
    let mut x1 = (gx1 + 1) as f64 * sx;

    // pad each side by a fraction of the box extent
    let pad_y = params.pad_frac * (y1 - y0);
    let pad_x = params.pad_frac * (x1 - x0);
    y0 -= pad_y;
    y1 += pad_y;
    x0 -= pad_x;
    x1 += pad_x;

    let mut y0 = (y0.round().max(0.0) as usize).min(img_h.saturating_sub(1));
    let mut y1 = (y1.round() as usize).clamp(y0 + 1, img_h);
    let mut x0 = (x0.round().max(0.0) as usize).min(img_w.saturating_sub(1));
    let mut x1 = (x1.round() as usize).clamp(x0 + 1, img_w);

    // enforce the minimum area by symmetric growth, keeping the aspect ratio
    let min_area = params.min_box_frac * (img_h * img_w) as f64;
    let area = ((y1 - y0) * (x1 - x0)) as f64;
    if area < min_area {
        let scale = (min_area / area).sqrt();
        let target_h = (((y1 - y0) as f64) * scale).ceil() as usize;
        let target_w = (((x1 - x0) as f64) * scale).ceil() as usize;
        (y0, y1) = grow_interval(y0, y1, target_h, img_h);
        (x0, x1) = grow_interval(x0, x1, target_w, img_w);
    }

    CropBox {
        x0,
        y0,
        x1,
        y1,
        source_h: img_h,
        source_w: img_w,
    }
}

/// Bilinear sample of one channel plane at fractional source coordinates,
/// clamped at the borders. Pixel centers sit at integer coordinates.
fn sample_bilinear(plane: &ndarray::ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = plane.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    plane[(y0, x0)] * (1.0 - fy) * (1.0 - fx)
        + plane[(y0, x1)] * (1.0 - fy) * fx
        + plane[(y1, x0)] * fy * (1.0 - fx)
        + plane[(y1, x1)] * fy * fx
}

/// Bilinear resize of a single plane with the half-pixel-center convention:
/// `src = (dst + 0.5) * scale - 0.5`. A same-size resize is the identity.
pub fn resize_plane(plane: &ndarray::ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let y = (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let x = (ox as f64 + 0.5) * sx - 0.5;
            out[(oy, ox)] = sample_bilinear(plane, y, x);
        }
    }
    out
}

/// Crop a window from an RGB image and bilinearly resize it to a square.
pub fn crop_and_resize(
    image: &Array3<f64>,
    window: &CropBox,
    target_side: usize,
) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if window.source_h != h || window.source_w != w || window.x1 > w || window.y1 > h {
        return Err(Error::shape(
            "crop_and_resize",
            format!("box {window:?} does not fit image ({h}, {w})"),
        ));
    }
    let mut out = Array3::zeros((c, target_side, target_side));
    for ch in 0..c {
        let plane = image.index_axis(ndarray::Axis(0), ch);
        let cropped = plane.slice(ndarray::s![window.y0..window.y1, window.x0..window.x1]);
        out.index_axis_mut(ndarray::Axis(0), ch)
            .assign(&resize_plane(&cropped, target_side, target_side));
    }
    Ok(out)
}

/// Resize a full RGB image to a square side (full-image crop box).
pub fn resize_rgb(image: &Array3<f64>, target_side: usize) -> Array3<f64> {
    let (_, h, w) = image.dim();
    let full = CropBox {
        x0: 0,
        y0: 0,
        x1: w,
        y1: h,
        source_h: h,
        source_w: w,
    };
    crop_and_resize(image, &full, target_side).expect("full box always fits")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax;
    use ndarray::Array1;

    fn one_hot_alpha(grid: usize, hot: (usize, usize)) -> Array2<f64> {
        let mut a = Array2::zeros((grid, grid));
        a[hot] = 1.0;
        a
    }

    #[test]
    fn uniform_attention_covers_full_image() {
        let alpha = Array2::from_elem((4, 4), 1.0 / 16.0);
        let cb = attention_to_bbox(&alpha, (64, 64), &RoiParams::default());
        assert_eq!((cb.x0, cb.y0, cb.x1, cb.y1), (0, 0, 64, 64));
    }

    #[test]
    fn one_hot_cell_maps_to_its_pixel_block() {
        let alpha = one_hot_alpha(4, (1, 2));
        let params = RoiParams {
            pad_frac: 0.0,
            min_box_frac: 0.0,
            threshold_mult: 1.0,
        };
        let cb = attention_to_bbox(&alpha, (64, 64), &params);
        assert_eq!((cb.x0, cb.x1), (32, 48));
        assert_eq!((cb.y0, cb.y1), (16, 32));
    }

    #[test]
    fn padding_expands_and_rounds() {
        // box [32,48) padded by 0.1 of its 16px extent -> [30.4, 49.6) -> [30, 50)
        let alpha = one_hot_alpha(4, (1, 2));
        let params = RoiParams {
            pad_frac: 0.1,
            min_box_frac: 0.0,
            threshold_mult: 1.0,
        };
        let cb = attention_to_bbox(&alpha, (64, 64), &params);
        assert_eq!((cb.x0, cb.x1), (30, 50));
    }

    #[test]
    fn one_cell_shift_moves_box_one_cell_extent() {
        let params = RoiParams {
            pad_frac: 0.0,
            min_box_frac: 0.0,
            threshold_mult: 1.0,
        };
        let a = attention_to_bbox(&one_hot_alpha(4, (1, 1)), (64, 64), &params);
        let b = attention_to_bbox(&one_hot_alpha(4, (1, 2)), (64, 64), &params);
        assert_eq!(b.x0 - a.x0, 16);
        assert_eq!(b.x1 - a.x1, 16);
        assert_eq!(a.y0, b.y0);
    }

    #[test]
    fn lowering_threshold_never_shrinks_box() {
        let mut rng = crate::rng::rng_from_seed(42);
        for _ in 0..50 {
            let logits: Array1<f64> =
                crate::nn::init::normal(&mut rng, 16, 2.0);
            let alpha2 = softmax(&logits).into_shape_with_order((4, 4)).unwrap();
            let mut prev: Option<CropBox> = None;
            for mult in [1.5, 1.0, 0.5, 0.25] {
                let params = RoiParams {
                    pad_frac: 0.0,
                    min_box_frac: 0.0,
                    threshold_mult: mult,
                };
                let cb = attention_to_bbox(&alpha2, (64, 64), &params);
                if let Some(p) = prev {
                    assert!(cb.x0 <= p.x0 && cb.y0 <= p.y0 && cb.x1 >= p.x1 && cb.y1 >= p.y1);
                }
                prev = Some(cb);
            }
        }
    }

    #[test]
    fn random_attention_yields_valid_boxes() {
        let mut rng = crate::rng::rng_from_seed(7);
        let params = RoiParams::default();
        for _ in 0..200 {
            let logits: Array1<f64> = crate::nn::init::normal(&mut rng, 64, 3.0);
            let alpha = softmax(&logits).into_shape_with_order((8, 8)).unwrap();
            let cb = attention_to_bbox(&alpha, (64, 64), &params);
            cb.validate(params.min_box_frac).unwrap();
        }
    }

    #[test]
    fn min_area_growth_applies() {
        let alpha = one_hot_alpha(8, (0, 0));
        let params = RoiParams {
            pad_frac: 0.0,
            min_box_frac: 0.25,
            threshold_mult: 1.0,
        };
        let cb = attention_to_bbox(&alpha, (64, 64), &params);
        assert!(cb.width() * cb.height() >= 1024);
        cb.validate(0.25).unwrap();
    }

    #[test]
    fn full_box_same_size_resize_is_identity() {
        let mut rng = crate::rng::rng_from_seed(1);
        let img: Array3<f64> = crate::nn::init::normal(&mut rng, (3, 8, 8), 1.0);
        let out = resize_rgb(&img, 8);
        let max_diff = (&img - &out).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn crop_resize_shape_contract() {
        let img = Array3::zeros((3, 64, 64));
        let cb = CropBox {
            x0: 10,
            y0: 12,
            x1: 26,
            y1: 28,
            source_h: 64,
            source_w: 64,
        };
        let out = crop_and_resize(&img, &cb, 224).unwrap();
        assert_eq!(out.dim(), (3, 224, 224));
    }

    #[test]
    fn checkerboard_downscale_is_mean() {
        let mut img = Array3::zeros((3, 2, 2));
        img[(0, 0, 0)] = 1.0;
        img[(0, 1, 1)] = 1.0; // channel 0 checkerboard
        let cb = CropBox {
            x0: 0,
            y0: 0,
            x1: 2,
            y1: 2,
            source_h: 2,
            source_w: 2,
        };
        let out = crop_and_resize(&img, &cb, 1).unwrap();
        assert!((out[(0, 0, 0)] - 0.5).abs() < 1e-12);
        assert!(out[(1, 0, 0)].abs() < 1e-12);
    }
}

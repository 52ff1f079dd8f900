//! PNG <-> f64 array conversion. Planar channel-first layout `(3, h, w)`,
//! values in [0, 1].

use crate::error::{Error, Result};
use ndarray::Array3;
use std::path::Path;

pub fn load_image_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = pixel.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_image_rgb(array: &Array3<f64>, path: &Path) -> Result<()> {
    let (c, h, w) = array.dim();
    assert_eq!(c, 3, "expected 3 channels");
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(array[(0, y, x)]),
                to_u8(array[(1, y, x)]),
                to_u8(array[(2, y, x)]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Save a single-channel map as an 8-bit grayscale PNG, scaled so the max
/// entry maps to 255 (all-zero maps stay black).
pub fn save_image_gray(array: &ndarray::Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = array.dim();
    let max = array.iter().copied().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (array[(y, x)] * scale).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

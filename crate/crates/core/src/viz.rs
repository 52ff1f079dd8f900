//! Attention export: heatmap PNGs and a JSON sidecar of the raw grids.

use crate::data::imageio::save_image_gray;
use crate::error::{Error, Result};
use crate::model::RpfModel;
use crate::roi::{resize_plane, CropBox};
use ndarray::{Array2, Array3};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
struct AttentionSidecar {
    attribute: String,
    attribute_id: usize,
    region_foreground: Vec<Vec<f64>>,
    region_background: Vec<Vec<f64>>,
    crop_box: CropBox,
    /// Per-head attribute-to-patch weights, each reshaped to the patch grid.
    patch_heads: Vec<Vec<Vec<f64>>>,
}

fn grid_to_vecs(grid: &Array2<f64>) -> Vec<Vec<f64>> {
    grid.outer_iter().map(|row| row.to_vec()).collect()
}

/// Files written by [`export_attention`], in output order.
pub fn export_file_names(heads: usize) -> Vec<String> {
    let mut names = vec!["region_fg.png".to_string(), "region_bg.png".to_string()];
    for h in 0..heads {
        names.push(format!("patch_head_{h}.png"));
    }
    names.push("attn.json".to_string());
    names
}

/// Run one forward pass and write the region foreground/background heatmaps
/// (bilinearly upsampled to the input resolution), one heatmap per
/// cross-attention head (upsampled to the RoI resolution), and a JSON sidecar
/// with the raw grids. Returns the written paths.
pub fn export_attention(
    model: &RpfModel,
    image: &Array3<f64>,
    attribute_id: usize,
    attribute_name: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (_, diagnostics) = model.embed(image, attribute_id)?;
    let (_, img_h, img_w) = image.dim();
    let mut written = Vec::new();

    for (name, grid) in [
        ("region_fg.png", &diagnostics.attention.foreground),
        ("region_bg.png", &diagnostics.attention.background),
    ] {
        let up = resize_plane(&grid.view(), img_h, img_w);
        let path = out_dir.join(name);
        save_image_gray(&up, &path)?;
        written.push(path);
    }

    let heads = diagnostics.patch_attention.nrows();
    let n = diagnostics.patch_attention.ncols();
    let grid_side = (n as f64).sqrt() as usize;
    let roi_side = model.config.backbone.patch.input_side;
    let mut patch_grids = Vec::with_capacity(heads);
    for h in 0..heads {
        let grid = diagnostics
            .patch_attention
            .row(h)
            .to_owned()
            .into_shape_with_order((grid_side, grid_side))
            .expect("square patch grid");
        let up = resize_plane(&grid.view(), roi_side, roi_side);
        let path = out_dir.join(format!("patch_head_{h}.png"));
        save_image_gray(&up, &path)?;
        written.push(path);
        patch_grids.push(grid_to_vecs(&grid));
    }

    let sidecar = AttentionSidecar {
        attribute: attribute_name.to_string(),
        attribute_id,
        region_foreground: grid_to_vecs(&diagnostics.attention.foreground),
        region_background: grid_to_vecs(&diagnostics.attention.background),
        crop_box: diagnostics.crop,
        patch_heads: patch_grids,
    };
    let json_path = out_dir.join("attn.json");
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);
    Ok(written)
}

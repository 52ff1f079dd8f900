//! Deterministic synthetic dataset generator.
//!
//! Each attribute owns a disjoint spatial zone of the image (cells of a
//! `ceil(sqrt(A))` grid); the attribute's value picks a glyph shape and color
//! drawn in that zone over per-image noise. Every random draw comes from a
//! sub-seed derived from `(master seed, image index)`, so the same spec and
//! seed reproduce byte-identical images and manifests, independent of
//! generation order or thread count.

use super::manifest::{save_manifest_lines, save_vocabulary, split_file_name, VOCABULARY_FILE};
use super::{
    AnnotatedSample, Attribute, AttributeValue, AttributeVocabulary, DatasetManifest,
    DatasetSplits, Split, ValueId,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{derive_seed, rng_from_seed, sample_index, sample_range, sample_unit};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub num_attributes: usize,
    pub values_per_attribute: usize,
    pub images_per_value: usize,
    pub image_size_px: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_attributes < 1 {
            return Err(Error::Config("num_attributes must be >= 1".into()));
        }
        if self.values_per_attribute < 2 {
            return Err(Error::Config("values_per_attribute must be >= 2".into()));
        }
        if self.image_size_px < 32 {
            return Err(Error::Config("image_size_px must be >= 32".into()));
        }
        if self.images_per_value < 1 {
            return Err(Error::Config("images_per_value must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.num_attributes * self.values_per_attribute * self.images_per_value
    }
}

/// Side of the zone grid: attributes occupy cells of a `g x g` partition.
fn zone_grid(num_attributes: usize) -> usize {
    (num_attributes as f64).sqrt().ceil() as usize
}

/// Pixel bounds (y0, y1, x0, x1) of the zone owned by `attribute`.
pub fn attribute_zone(attribute: usize, num_attributes: usize, size: usize) -> (usize, usize, usize, usize) {
    let g = zone_grid(num_attributes);
    let zs = size / g;
    let row = attribute / g;
    let col = attribute % g;
    (row * zs, (row + 1) * zs, col * zs, (col + 1) * zs)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Render one image as an 8-bit RGB buffer. Pure: output depends only on the
/// geometry spec, the per-attribute value labels and `image_seed`.
pub fn render_image(
    size: usize,
    num_attributes: usize,
    values_per_attribute: usize,
    labels: &[ValueId],
    image_seed: u64,
) -> image::RgbImage {
    let mut img = image::RgbImage::new(size as u32, size as u32);

    // Background noise over the whole image, in fixed pixel order.
    let mut noise_rng = rng_from_seed(derive_seed(image_seed, 0));
    for y in 0..size {
        for x in 0..size {
            let mut px = [0u8; 3];
            for channel in &mut px {
                *channel = (90.0 + 60.0 * sample_unit(&mut noise_rng)) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }

    for (attr, &value) in labels.iter().enumerate() {
        let (y0, y1, x0, x1) = attribute_zone(attr, num_attributes, size);
        let zs = (y1 - y0) as f64;
        let mut jitter_rng = rng_from_seed(derive_seed(image_seed, 1000 + attr as u64));
        let cy = (y0 + y1) as f64 / 2.0 + sample_range(&mut jitter_rng, -zs / 8.0, zs / 8.0);
        let cx = (x0 + x1) as f64 / 2.0 + sample_range(&mut jitter_rng, -zs / 8.0, zs / 8.0);
        let radius = zs * sample_range(&mut jitter_rng, 0.24, 0.34);

        let hue = value as f64 * 360.0 / values_per_attribute as f64;
        let rgb = hsv_to_rgb(hue, 0.85, 0.95);
        let color = image::Rgb([
            (rgb[0] * 255.0) as u8,
            (rgb[1] * 255.0) as u8,
            (rgb[2] * 255.0) as u8,
        ]);

        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside = match value % 4 {
                    0 => dy * dy + dx * dx <= radius * radius, // disc
                    1 => dy.abs() <= radius * 0.85 && dx.abs() <= radius * 0.85, // square
                    2 => dy.abs() + dx.abs() <= radius * 1.2,  // diamond
                    _ => {
                        // ring
                        let d2 = dy * dy + dx * dx;
                        d2 <= radius * radius && d2 >= (radius * 0.55) * (radius * 0.55)
                    }
                };
                if inside {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img
}

fn build_vocabulary(spec: &SyntheticSpec) -> AttributeVocabulary {
    AttributeVocabulary {
        attributes: (0..spec.num_attributes)
            .map(|id| Attribute {
                id,
                name: format!("attr_{id}"),
                values: (0..spec.values_per_attribute)
                    .map(|v| AttributeValue {
                        id: v,
                        name: format!("attr_{id}_val_{v}"),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Labels for image `index`: the designated (attribute, value) pair encoded
/// in the index, all other attributes drawn from the image's label stream.
fn labels_for(spec: &SyntheticSpec, index: usize, image_seed: u64) -> Vec<ValueId> {
    let per_value = spec.images_per_value;
    let designated_attr = index / (spec.values_per_attribute * per_value);
    let designated_value = (index / per_value) % spec.values_per_attribute;
    let mut label_rng = rng_from_seed(derive_seed(image_seed, 500));
    (0..spec.num_attributes)
        .map(|attr| {
            if attr == designated_attr {
                designated_value
            } else {
                sample_index(&mut label_rng, spec.values_per_attribute)
            }
        })
        .collect()
}

/// Split for image `index`: within each designated (attribute, value) group
/// the first slice goes to train, then val, then test. Groups smaller than 3
/// put every image in all three splits.
fn split_for(spec: &SyntheticSpec, index: usize) -> Option<Split> {
    let n = spec.images_per_value;
    if n < 3 {
        return None; // caller replicates into all splits
    }
    let within = index % n;
    let n_val = (n / 8).max(1);
    let n_test = (n / 8).max(1);
    let n_train = n - n_val - n_test;
    Some(if within < n_train {
        Split::Train
    } else if within < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    })
}

/// Generate images and manifests under `out_dir`. Returns the three split
/// manifests; the union of their samples covers every generated image.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetSplits> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let total = spec.total_images();
    let results: Vec<Result<AnnotatedSample>> = exec::map_range(total, |index| {
        let image_seed = derive_seed(spec.seed, index as u64);
        let labels = labels_for(spec, index, image_seed);
        let img = render_image(
            spec.image_size_px,
            spec.num_attributes,
            spec.values_per_attribute,
            &labels,
            image_seed,
        );
        let rel = PathBuf::from(format!("images/img_{index:05}.png"));
        let path = out_dir.join(&rel);
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            source: e,
        })?;
        Ok(AnnotatedSample {
            image: rel,
            labels: labels.iter().copied().enumerate().collect::<BTreeMap<_, _>>(),
        })
    });

    let mut per_split: [Vec<AnnotatedSample>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (index, result) in results.into_iter().enumerate() {
        let sample = result?;
        match split_for(spec, index) {
            Some(Split::Train) => per_split[0].push(sample),
            Some(Split::Val) => per_split[1].push(sample),
            Some(Split::Test) => per_split[2].push(sample),
            None => {
                per_split[0].push(sample.clone());
                per_split[1].push(sample.clone());
                per_split[2].push(sample);
            }
        }
    }

    let vocabulary = build_vocabulary(spec);
    save_vocabulary(&vocabulary, &out_dir.join(VOCABULARY_FILE))?;
    let splits = [Split::Train, Split::Val, Split::Test];
    for (samples, split) in per_split.iter().zip(splits) {
        save_manifest_lines(samples, &out_dir.join(split_file_name(split)))?;
    }

    let [train, val, test] = per_split;
    let manifest = |samples: Vec<AnnotatedSample>, split| DatasetManifest {
        vocabulary: vocabulary.clone(),
        samples,
        split,
        base_dir: out_dir.to_path_buf(),
    };
    let out = DatasetSplits {
        train: manifest(train, Split::Train),
        val: manifest(val, Split::Val),
        test: manifest(test, Split::Test),
    };
    out.train.validate()?;
    out.val.validate()?;
    out.test.validate()?;
    Ok(out)
}

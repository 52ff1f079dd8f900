//! Attribute vocabulary, dataset manifests, synthetic data and batch
//! construction.

pub mod imageio;
pub mod manifest;
pub mod synthetic;
pub mod triplets;

pub use manifest::{load_manifest, load_splits, DatasetSplits};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};
pub use triplets::{build_triplets, minibatch_sets, AnchorSets, BatchSlots, MiniBatchSets, Triplet};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

pub type AttributeId = usize;
pub type ValueId = usize;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AttributeValue {
    pub id: ValueId,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Attribute {
    pub id: AttributeId,
    pub name: String,
    pub values: Vec<AttributeValue>,
}

/// The queryable attributes and their discrete values; the conditioning
/// signal of every forward pass.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AttributeVocabulary {
    pub attributes: Vec<Attribute>,
}

impl AttributeVocabulary {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Data("vocabulary has no attributes".into()));
        }
        for (i, attr) in self.attributes.iter().enumerate() {
            if attr.id != i {
                return Err(Error::Data(format!(
                    "attribute ids must be contiguous from 0; found id {} at position {}",
                    attr.id, i
                )));
            }
            if attr.values.len() < 2 {
                return Err(Error::Data(format!(
                    "attribute '{}' must have at least 2 values",
                    attr.name
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for v in &attr.values {
                if !seen.insert(v.id) {
                    return Err(Error::Data(format!(
                        "duplicate value id {} in attribute '{}'",
                        v.id, attr.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn attribute_by_name(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn attribute_names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn has_value(&self, attribute: AttributeId, value: ValueId) -> bool {
        self.attributes
            .get(attribute)
            .is_some_and(|a| a.values.iter().any(|v| v.id == value))
    }
}

/// One dataset entry: an image plus its (attribute, value) labels. Labels may
/// be partial; a sample simply never serves attributes it is not labeled for.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AnnotatedSample {
    pub image: PathBuf,
    pub labels: BTreeMap<AttributeId, ValueId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// A validated list of samples for one split, with the vocabulary they were
/// checked against and the directory image paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub vocabulary: AttributeVocabulary,
    pub samples: Vec<AnnotatedSample>,
    pub split: Split,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        self.vocabulary.validate()?;
        if self.samples.is_empty() {
            return Err(Error::Data("empty manifest".into()));
        }
        for (i, sample) in self.samples.iter().enumerate() {
            for (&attr, &value) in &sample.labels {
                if !self.vocabulary.has_value(attr, value) {
                    return Err(Error::Data(format!(
                        "sample {} ({}) labels attribute {} with unknown value {}",
                        i,
                        sample.image.display(),
                        attr,
                        value
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn image_path(&self, sample: usize) -> PathBuf {
        self.base_dir.join(&self.samples[sample].image)
    }

    /// Sample indices labeled for `attribute`.
    pub fn labeled_for(&self, attribute: AttributeId) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.labels.contains_key(&attribute))
            .map(|(i, _)| i)
            .collect()
    }
}

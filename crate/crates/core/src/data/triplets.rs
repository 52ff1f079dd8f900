//! Triplet sampling and in-batch positive/negative set construction.

use super::{AttributeId, DatasetManifest, ValueId};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, sample_index};
use std::collections::BTreeMap;

/// `(anchor, positive, negative | attribute)`: anchor and positive share the
/// attribute's value, the negative differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub attribute: AttributeId,
}

impl Triplet {
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let label = |sample: usize| -> Result<ValueId> {
            manifest.samples[sample]
                .labels
                .get(&self.attribute)
                .copied()
                .ok_or_else(|| {
                    Error::Data(format!(
                        "sample {sample} not labeled for attribute {}",
                        self.attribute
                    ))
                })
        };
        let (a, p, n) = (label(self.anchor)?, label(self.positive)?, label(self.negative)?);
        if a != p {
            return Err(Error::Data(format!(
                "triplet anchor/positive values differ: {a} vs {p}"
            )));
        }
        if a == n {
            return Err(Error::Data(format!(
                "triplet anchor/negative share value {a}"
            )));
        }
        if self.anchor == self.positive {
            return Err(Error::Data("triplet positive equals anchor".into()));
        }
        Ok(())
    }
}

/// Sample `count` triplets for one attribute: anchor uniform over samples
/// whose value group has a positive available, positive uniform over the
/// same-value group excluding the anchor, negative uniform over samples with
/// a different value. Deterministic under `seed`.
pub fn build_triplets(
    manifest: &DatasetManifest,
    attribute: AttributeId,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if attribute >= manifest.vocabulary.num_attributes() {
        return Err(Error::Data(format!("unknown attribute id {attribute}")));
    }
    let mut by_value: BTreeMap<ValueId, Vec<usize>> = BTreeMap::new();
    for (i, sample) in manifest.samples.iter().enumerate() {
        if let Some(&v) = sample.labels.get(&attribute) {
            by_value.entry(v).or_default().push(i);
        }
    }
    if by_value.len() < 2 {
        return Err(Error::Data(format!(
            "attribute {attribute}: no valid negatives (only {} observed value)",
            by_value.len()
        )));
    }
    // anchors need a same-value mate
    let anchor_pool: Vec<(usize, ValueId)> = by_value
        .iter()
        .filter(|(_, group)| group.len() >= 2)
        .flat_map(|(&v, group)| group.iter().map(move |&i| (i, v)))
        .collect();
    if anchor_pool.is_empty() {
        return Err(Error::Data(format!(
            "attribute {attribute}: no value has two samples; no valid positives"
        )));
    }
    // per value: every sample with a different value
    let all_labeled: Vec<(usize, ValueId)> = by_value
        .iter()
        .flat_map(|(&v, group)| group.iter().map(move |&i| (i, v)))
        .collect();
    let negatives_for = |value: ValueId| -> Vec<usize> {
        all_labeled
            .iter()
            .filter(|(_, v)| *v != value)
            .map(|(i, _)| *i)
            .collect()
    };
    let neg_pools: BTreeMap<ValueId, Vec<usize>> = by_value
        .keys()
        .map(|&v| (v, negatives_for(v)))
        .collect();

    let mut rng = rng_from_seed(seed);
    let mut triplets = Vec::with_capacity(count);
    for _ in 0..count {
        let (anchor, value) = anchor_pool[sample_index(&mut rng, anchor_pool.len())];
        let group = &by_value[&value];
        let anchor_pos = group.iter().position(|&i| i == anchor).expect("anchor in group");
        // uniform over the group minus the anchor slot
        let j = sample_index(&mut rng, group.len() - 1);
        let positive = group[if j >= anchor_pos { j + 1 } else { j }];
        let negs = &neg_pools[&value];
        let negative = negs[sample_index(&mut rng, negs.len())];
        triplets.push(Triplet {
            anchor,
            positive,
            negative,
            attribute,
        });
    }
    Ok(triplets)
}

/// The labeled embedding slots of one mini-batch (one attribute per batch).
/// Slots usually cover anchors plus their triplet mates; `anchors` points at
/// the anchor slots and `paired_positive` at each anchor's own positive slot,
/// which is kept out of that anchor's extra-positive set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSlots {
    pub values: Vec<ValueId>,
    pub anchors: Vec<usize>,
    pub paired_positive: Vec<Option<usize>>,
}

impl BatchSlots {
    /// Slots that are plain anchors with no paired mates.
    pub fn from_anchor_values(values: Vec<ValueId>) -> Self {
        let anchors = (0..values.len()).collect();
        let paired_positive = vec![None; values.len()];
        BatchSlots {
            values,
            anchors,
            paired_positive,
        }
    }
}

/// Per-anchor index sets over the batch slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSets {
    /// Same value as the anchor; excludes the anchor itself and its paired
    /// positive slot.
    pub positives: Vec<usize>,
    /// Different value for the batch attribute.
    pub nce_negatives: Vec<usize>,
    /// Every slot of the batch (background embeddings), the anchor's own
    /// included.
    pub background: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatchSets {
    pub per_anchor: Vec<AnchorSets>,
}

/// Build the positive / negative / background sets of every anchor from the
/// batch slots. Sets may be empty.
pub fn minibatch_sets(slots: &BatchSlots) -> MiniBatchSets {
    let all: Vec<usize> = (0..slots.values.len()).collect();
    let per_anchor = slots
        .anchors
        .iter()
        .zip(&slots.paired_positive)
        .map(|(&anchor_slot, &paired)| {
            let value = slots.values[anchor_slot];
            let mut positives = Vec::new();
            let mut nce_negatives = Vec::new();
            for (j, &v) in slots.values.iter().enumerate() {
                if v == value {
                    if j != anchor_slot && Some(j) != paired {
                        positives.push(j);
                    }
                } else {
                    nce_negatives.push(j);
                }
            }
            AnchorSets {
                positives,
                nce_negatives,
                background: all.clone(),
            }
        })
        .collect();
    MiniBatchSets { per_anchor }
}

//! Retrieval evaluation: fused attribute-specific similarity, multi-attribute
//! composition, deterministic ranking, and mean average precision.

use crate::data::{AttributeId, ValueId};
use crate::error::{Error, Result};
use crate::exec;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Region and patch embedding matrices of one attribute's gallery, aligned
/// row-by-row with sample ids and value labels. Rows are L2-normalized.
#[derive(Debug, Clone)]
pub struct AttributeGallery {
    pub region: Array2<f64>,
    pub patch: Array2<f64>,
    pub sample_ids: Vec<usize>,
    pub values: Vec<ValueId>,
}

impl AttributeGallery {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Immutable per-attribute embedding index of a gallery split.
#[derive(Debug, Clone, Default)]
pub struct GalleryIndex {
    pub per_attribute: BTreeMap<AttributeId, AttributeGallery>,
}

/// Query-side embeddings for one attribute.
#[derive(Debug, Clone)]
pub struct QueryEmbedding {
    pub region: Array1<f64>,
    pub patch: Array1<f64>,
}

/// Weighted sum of the two branch similarities:
/// `lambda * s(r, r*) + (1 - lambda) * s(p, p*)`.
pub fn fused_similarity(
    query_region: &Array1<f64>,
    query_patch: &Array1<f64>,
    gallery_region: &ndarray::ArrayView1<f64>,
    gallery_patch: &ndarray::ArrayView1<f64>,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * query_region.dot(gallery_region) + (1.0 - lambda) * query_patch.dot(gallery_patch))
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Sum of per-attribute fused similarities.
pub fn compose_multi_attribute(similarities: &[f64]) -> Result<f64> {
    if similarities.is_empty() {
        return Err(Error::Config("multi-attribute composition needs at least one attribute".into()));
    }
    Ok(similarities.iter().sum())
}

/// Rank the gallery for a query over one or more attributes. Scores are
/// fused per attribute and summed; only gallery items present under every
/// requested attribute participate. Descending score, ties broken by
/// ascending sample id.
pub fn rank_gallery(
    query: &BTreeMap<AttributeId, QueryEmbedding>,
    index: &GalleryIndex,
    attributes: &[AttributeId],
    lambda: f64,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    check_lambda(lambda)?;
    if attributes.is_empty() {
        return Err(Error::Config("rank_gallery needs at least one attribute".into()));
    }
    let mut scores: BTreeMap<usize, (f64, usize)> = BTreeMap::new(); // id -> (sum, count)
    for &attr in attributes {
        let gallery = index
            .per_attribute
            .get(&attr)
            .ok_or_else(|| Error::Data(format!("unknown attribute {attr} in gallery index")))?;
        let q = query
            .get(&attr)
            .ok_or_else(|| Error::Data(format!("query lacks embeddings for attribute {attr}")))?;
        for row in 0..gallery.len() {
            let s = fused_similarity(
                &q.region,
                &q.patch,
                &gallery.region.row(row),
                &gallery.patch.row(row),
                lambda,
            )?;
            let entry = scores.entry(gallery.sample_ids[row]).or_insert((0.0, 0));
            entry.0 += s;
            entry.1 += 1;
        }
    }
    let mut ranked: Vec<(usize, f64)> = scores
        .into_iter()
        .filter(|(_, (_, count))| *count == attributes.len())
        .map(|(id, (sum, _))| (id, sum))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
    });
    ranked.truncate(k.min(ranked.len()));
    Ok(ranked)
}

/// Average precision of a ranked binary relevance list: mean of precision@j
/// over the relevant ranks; 0 when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        acc / hits as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerQueryAp {
    pub attribute: AttributeId,
    pub sample_id: usize,
    pub ap: f64,
}

/// Per-attribute and overall mean average precision. The overall figure is
/// the query-weighted pooled mean, not the mean of per-attribute means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub per_attribute: BTreeMap<String, f64>,
    pub overall: f64,
    pub num_queries: usize,
    pub lambda: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_query: Vec<PerQueryAp>,
}

/// Leave-one-out evaluation over the index: every indexed item queries its
/// attribute's gallery (itself excluded); an item is relevant when it shares
/// the query's value. Queries with no relevant gallery item count with AP 0.
/// Attributes with no queries are skipped with a log warning.
pub fn evaluate_map(index: &GalleryIndex, lambda: f64) -> Result<RetrievalReport> {
    check_lambda(lambda)?;
    let mut per_query = Vec::new();
    let mut per_attribute = BTreeMap::new();
    for (&attr, gallery) in &index.per_attribute {
        if gallery.is_empty() {
            log::warn!("attribute {attr} has no queries; skipped");
            continue;
        }
        let aps: Vec<PerQueryAp> = exec::map_range(gallery.len(), |qi| {
            let query = QueryEmbedding {
                region: gallery.region.row(qi).to_owned(),
                patch: gallery.patch.row(qi).to_owned(),
            };
            let mut scored: Vec<(usize, f64, bool)> = (0..gallery.len())
                .filter(|&gi| gi != qi)
                .map(|gi| {
                    let s = lambda * query.region.dot(&gallery.region.row(gi))
                        + (1.0 - lambda) * query.patch.dot(&gallery.patch.row(gi));
                    (
                        gallery.sample_ids[gi],
                        s,
                        gallery.values[gi] == gallery.values[qi],
                    )
                })
                .collect();
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .expect("finite scores")
                    .then(a.0.cmp(&b.0))
            });
            let relevance: Vec<bool> = scored.iter().map(|(_, _, rel)| *rel).collect();
            PerQueryAp {
                attribute: attr,
                sample_id: gallery.sample_ids[qi],
                ap: average_precision(&relevance),
            }
        });
        let mean = aps.iter().map(|q| q.ap).sum::<f64>() / aps.len() as f64;
        per_attribute.insert(attr.to_string(), mean);
        per_query.extend(aps);
    }
    if per_query.is_empty() {
        return Err(Error::Data("no queries in any attribute gallery".into()));
    }
    let overall = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    Ok(RetrievalReport {
        per_attribute,
        overall,
        num_queries: per_query.len(),
        lambda,
        per_query,
    })
}

impl RetrievalReport {
    /// Serialize without the per-query audit trail.
    pub fn summary_json(&self) -> String {
        let mut compact = self.clone();
        compact.per_query.clear();
        serde_json::to_string_pretty(&compact).expect("report serializes")
    }

    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("attribute,sample_id,ap\n");
        for q in &self.per_query {
            out.push_str(&format!("{},{},{}\n", q.attribute, q.sample_id, q.ap));
        }
        out
    }
}

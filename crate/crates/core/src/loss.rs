//! Training losses: per-branch triplet losses, the cross-branch InfoNCE, its
//! enhanced variant with extra same-value positives and scaled background
//! negatives, and the weighted total.
//!
//! All similarities are dot products of L2-normalized embeddings (cosine).
//! Exponent sums use log-sum-exp with max subtraction. Each loss returns its
//! value together with gradients w.r.t. every embedding row it touched.

use crate::data::MiniBatchSets;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Triplet margin `m`.
    pub margin: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Background-negative scale in the enhanced loss.
    pub mu: f64,
    /// Weight of the patch-branch triplet loss in the total.
    pub beta: f64,
    /// Weight of the enhanced InfoNCE in the total.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            tau: 0.07,
            mu: 12.0,
            beta: 0.1,
            gamma: 0.04,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        if self.mu < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("mu, beta, gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Embeddings of one training batch in slot layout: one row per batch image.
/// The first `num_anchors` slots are the anchors; `own_slot[i]` is anchor
/// `i`'s own slot (its paired views live at the indices recorded in the
/// accompanying [`MiniBatchSets`]).
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    /// Region foreground embeddings, one per slot.
    pub region_fg: Array2<f64>,
    /// Region background embeddings, one per slot.
    pub region_bg: Array2<f64>,
    /// Patch foreground embeddings, one per slot.
    pub patch_fg: Array2<f64>,
}

/// Gradients mirroring [`BatchEmbeddings`].
#[derive(Debug, Clone)]
pub struct BatchEmbeddingGrads {
    pub region_fg: Array2<f64>,
    pub region_bg: Array2<f64>,
    pub patch_fg: Array2<f64>,
}

impl BatchEmbeddingGrads {
    pub fn zeros(slots: usize, dim: usize) -> Self {
        BatchEmbeddingGrads {
            region_fg: Array2::zeros((slots, dim)),
            region_bg: Array2::zeros((slots, dim)),
            patch_fg: Array2::zeros((slots, dim)),
        }
    }
}

/// Mean hinge `max(0, m - s(a, p) + s(a, n))` over aligned rows. Returns the
/// loss and gradients w.r.t. anchors, positives, negatives.
pub fn triplet_loss(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    negatives: &Array2<f64>,
    margin: f64,
) -> (f64, Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = anchors.nrows();
    assert!(n > 0 && positives.nrows() == n && negatives.nrows() == n);
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_a = Array2::zeros(anchors.raw_dim());
    let mut d_p = Array2::zeros(positives.raw_dim());
    let mut d_n = Array2::zeros(negatives.raw_dim());
    for i in 0..n {
        let a = anchors.row(i);
        let p = positives.row(i);
        let neg = negatives.row(i);
        let violation = margin - a.dot(&p) + a.dot(&neg);
        if violation > 0.0 {
            loss += violation * scale;
            let diff = (&neg - &p) * scale;
            d_a.row_mut(i).assign(&diff);
            d_p.row_mut(i).assign(&(&a * (-scale)));
            d_n.row_mut(i).assign(&(&a * scale));
        }
    }
    (loss, d_a, d_p, d_n)
}

/// One exponent term of a contrastive partition function.
struct Term {
    /// Index into the patch (or background) slot rows.
    slot: usize,
    /// Raw exponent value (`dot / tau` plus any log-scale shift).
    exponent: f64,
    /// True when the term pairs the anchor with a background embedding.
    background: bool,
}

fn log_sum_exp(terms: &[&Term]) -> f64 {
    let max = terms
        .iter()
        .map(|t| t.exponent)
        .fold(f64::NEG_INFINITY, f64::max);
    max + terms
        .iter()
        .map(|t| (t.exponent - max).exp())
        .sum::<f64>()
        .ln()
}

/// Softmax weights over terms (gradient of their log-sum-exp).
fn softmax_weights(terms: &[&Term]) -> Vec<f64> {
    let max = terms
        .iter()
        .map(|t| t.exponent)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = terms.iter().map(|t| (t.exponent - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cross-branch InfoNCE: each anchor's region embedding is contrasted with
/// its own patch embedding against patch embeddings of different values.
pub fn info_nce(
    embeddings: &BatchEmbeddings,
    sets: &MiniBatchSets,
    own_slot: &[usize],
    tau: f64,
) -> Result<(f64, BatchEmbeddingGrads)> {
    e_info_nce_impl(embeddings, sets, own_slot, tau, 0.0, false)
}

/// Enhanced InfoNCE: adds same-value patch embeddings to the numerator and
/// `mu`-scaled region background embeddings to the denominator.
pub fn e_info_nce(
    embeddings: &BatchEmbeddings,
    sets: &MiniBatchSets,
    own_slot: &[usize],
    tau: f64,
    mu: f64,
) -> Result<(f64, BatchEmbeddingGrads)> {
    e_info_nce_impl(embeddings, sets, own_slot, tau, mu, true)
}

fn e_info_nce_impl(
    embeddings: &BatchEmbeddings,
    sets: &MiniBatchSets,
    own_slot: &[usize],
    tau: f64,
    mu: f64,
    enhanced: bool,
) -> Result<(f64, BatchEmbeddingGrads)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let num_anchors = sets.per_anchor.len();
    assert_eq!(own_slot.len(), num_anchors);
    let slots = embeddings.patch_fg.nrows();
    let dim = embeddings.patch_fg.ncols();
    let mut grads = BatchEmbeddingGrads::zeros(slots, dim);
    if num_anchors == 0 {
        return Ok((0.0, grads));
    }
    let inv_n = 1.0 / num_anchors as f64;
    let mut loss = 0.0;

    for (i, anchor_sets) in sets.per_anchor.iter().enumerate() {
        let r_i = embeddings.region_fg.row(own_slot[i]);
        let mut numerator: Vec<Term> = Vec::new();
        let mut extra_denominator: Vec<Term> = Vec::new();

        numerator.push(Term {
            slot: own_slot[i],
            exponent: r_i.dot(&embeddings.patch_fg.row(own_slot[i])) / tau,
            background: false,
        });
        if enhanced {
            for &j in &anchor_sets.positives {
                numerator.push(Term {
                    slot: j,
                    exponent: r_i.dot(&embeddings.patch_fg.row(j)) / tau,
                    background: false,
                });
            }
        }
        for &j in &anchor_sets.nce_negatives {
            extra_denominator.push(Term {
                slot: j,
                exponent: r_i.dot(&embeddings.patch_fg.row(j)) / tau,
                background: false,
            });
        }
        if enhanced && mu > 0.0 {
            let log_mu = mu.ln();
            for &j in &anchor_sets.background {
                extra_denominator.push(Term {
                    slot: j,
                    exponent: log_mu + r_i.dot(&embeddings.region_bg.row(j)) / tau,
                    background: true,
                });
            }
        }

        let num_refs: Vec<&Term> = numerator.iter().collect();
        let den_refs: Vec<&Term> = numerator.iter().chain(extra_denominator.iter()).collect();
        loss += (log_sum_exp(&den_refs) - log_sum_exp(&num_refs)) * inv_n;

        // d loss_i / d exponent_k = w_den_k - w_num_k (num terms) or w_den_k
        let w_num = softmax_weights(&num_refs);
        let w_den = softmax_weights(&den_refs);
        let mut coeffs: Vec<(usize, f64, bool)> = Vec::with_capacity(den_refs.len());
        for (k, term) in den_refs.iter().enumerate() {
            let mut c = w_den[k];
            if k < numerator.len() {
                c -= w_num[k];
            }
            coeffs.push((term.slot, c * inv_n, term.background));
        }

        // exponent = r_i . e_slot / tau (+ const): grads through both sides
        let mut d_r = Array1::<f64>::zeros(dim);
        for &(slot, coeff, background) in &coeffs {
            if background {
                let bg = embeddings.region_bg.row(slot);
                d_r.scaled_add(coeff / tau, &bg);
                grads
                    .region_bg
                    .row_mut(slot)
                    .scaled_add(coeff / tau, &r_i);
            } else {
                let p = embeddings.patch_fg.row(slot);
                d_r.scaled_add(coeff / tau, &p);
                grads.patch_fg.row_mut(slot).scaled_add(coeff / tau, &r_i);
            }
        }
        grads.region_fg.row_mut(own_slot[i]).scaled_add(1.0, &d_r);
    }
    Ok((loss, grads))
}

/// `loss_r + beta * loss_p + gamma * loss_e`.
pub fn total_loss(loss_r: f64, loss_p: f64, loss_e: f64, beta: f64, gamma: f64) -> f64 {
    loss_r + beta * loss_p + gamma * loss_e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{minibatch_sets, BatchSlots};
    use crate::nn::gradcheck::{check_fn_grad, GradCheckCfg};
    use crate::nn::l2_normalize;
    use crate::rng::{rng_from_seed, Rng};
    use ndarray::array;

    fn random_unit_rows(rng: &mut Rng, n: usize, dim: usize) -> Array2<f64> {
        let mut out = Array2::zeros((n, dim));
        for mut row in out.outer_iter_mut() {
            let v: Array1<f64> = crate::nn::init::normal(rng, dim, 1.0);
            let (u, _) = l2_normalize(&v);
            row.assign(&u);
        }
        out
    }

    /// Plain scalar enumeration of the triplet loss.
    fn triplet_oracle(a: &Array2<f64>, p: &Array2<f64>, n: &Array2<f64>, m: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..a.nrows() {
            let sp: f64 = (0..a.ncols()).map(|j| a[(i, j)] * p[(i, j)]).sum();
            let sn: f64 = (0..a.ncols()).map(|j| a[(i, j)] * n[(i, j)]).sum();
            acc += (m - sp + sn).max(0.0);
        }
        acc / a.nrows() as f64
    }

    /// Plain scalar enumeration of the (enhanced) InfoNCE loss, computed with
    /// naive exponentials.
    fn e_info_nce_oracle(
        emb: &BatchEmbeddings,
        sets: &MiniBatchSets,
        own: &[usize],
        tau: f64,
        mu: f64,
        enhanced: bool,
    ) -> f64 {
        let dot = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
        };
        let mut acc = 0.0;
        for (i, s) in sets.per_anchor.iter().enumerate() {
            let r = emb.region_fg.row(own[i]);
            let mut num = (dot(r, emb.patch_fg.row(own[i])) / tau).exp();
            if enhanced {
                for &j in &s.positives {
                    num += (dot(r, emb.patch_fg.row(j)) / tau).exp();
                }
            }
            let mut den = num;
            for &j in &s.nce_negatives {
                den += (dot(r, emb.patch_fg.row(j)) / tau).exp();
            }
            if enhanced {
                for &j in &s.background {
                    den += mu * (dot(r, emb.region_bg.row(j)) / tau).exp();
                }
            }
            acc += -(num / den).ln();
        }
        acc / sets.per_anchor.len() as f64
    }

    #[test]
    fn triplet_zero_when_margin_satisfied() {
        // s(a,p) = 1, s(a,n) = -1, m = 0.2
        let a = array![[1.0, 0.0]];
        let p = array![[1.0, 0.0]];
        let n = array![[-1.0, 0.0]];
        let (loss, ..) = triplet_loss(&a, &p, &n, 0.2);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn triplet_equal_similarities_give_margin() {
        let a = array![[1.0, 0.0]];
        let p = array![[0.6, 0.8]];
        let n = array![[0.6, -0.8]];
        let (loss, ..) = triplet_loss(&a, &p, &n, 0.2);
        assert!((loss - 0.2).abs() < 1e-12);
    }

    #[test]
    fn triplet_hand_case() {
        // s(a,p) = 0.5, s(a,n) = 0.6, m = 0.2 -> 0.3
        let a = array![[1.0, 0.0]];
        let p = array![[0.5, 0.75f64.sqrt()]];
        let n = array![[0.6, 0.8]];
        let (loss, ..) = triplet_loss(&a, &p, &n, 0.2);
        assert!((loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_matches_oracle_on_random_batches() {
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            let a = random_unit_rows(&mut rng, 5, 7);
            let p = random_unit_rows(&mut rng, 5, 7);
            let n = random_unit_rows(&mut rng, 5, 7);
            let (loss, ..) = triplet_loss(&a, &p, &n, 0.2);
            let expected = triplet_oracle(&a, &p, &n, 0.2);
            assert!((loss - expected).abs() < 1e-6);
        }
    }

    fn batch_fixture(rng: &mut Rng, values: Vec<usize>) -> (BatchEmbeddings, MiniBatchSets, Vec<usize>) {
        let n = values.len();
        let emb = BatchEmbeddings {
            region_fg: random_unit_rows(rng, n, 6),
            region_bg: random_unit_rows(rng, n, 6),
            patch_fg: random_unit_rows(rng, n, 6),
        };
        let sets = minibatch_sets(&BatchSlots::from_anchor_values(values));
        let own: Vec<usize> = (0..n).collect();
        (emb, sets, own)
    }

    #[test]
    fn info_nce_zero_without_negatives() {
        let mut rng = rng_from_seed(2);
        let (emb, sets, own) = batch_fixture(&mut rng, vec![0, 0, 0]);
        let (loss, grads) = info_nce(&emb, &sets, &own, 0.07).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.region_fg.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn info_nce_symmetric_two_way_is_ln_two() {
        // one anchor, one negative, r.p+ == r.p-
        let emb = BatchEmbeddings {
            region_fg: array![[1.0, 0.0], [0.0, 1.0]],
            region_bg: array![[0.0, 1.0], [1.0, 0.0]],
            patch_fg: array![[0.6, 0.8], [0.6, 0.8]],
        };
        let slots = BatchSlots {
            values: vec![0, 1],
            anchors: vec![0],
            paired_positive: vec![None],
        };
        let sets = minibatch_sets(&slots);
        let (loss, _) = info_nce(&emb, &sets, &[0], 0.07).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_matches_oracle_on_random_batches() {
        let mut rng = rng_from_seed(3);
        for round in 0..100 {
            let values: Vec<usize> = (0..6).map(|i| (i + round) % 3).collect();
            let (emb, sets, own) = batch_fixture(&mut rng, values);
            let (loss, _) = info_nce(&emb, &sets, &own, 0.07).unwrap();
            let expected = e_info_nce_oracle(&emb, &sets, &own, 0.07, 0.0, false);
            assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
        }
    }

    #[test]
    fn enhanced_degenerates_to_info_nce() {
        // distinct values -> empty positive sets; mu = 0 removes backgrounds
        let mut rng = rng_from_seed(4);
        for _ in 0..100 {
            let (emb, sets, own) = batch_fixture(&mut rng, vec![0, 1, 2, 3]);
            let (plain, _) = info_nce(&emb, &sets, &own, 0.07).unwrap();
            let (enhanced, _) = e_info_nce(&emb, &sets, &own, 0.07, 0.0).unwrap();
            assert!((plain - enhanced).abs() < 1e-6);
        }
    }

    #[test]
    fn enhanced_positive_without_negatives_still_penalized() {
        // empty positives and nce negatives, mu > 0: denominator > numerator
        let mut rng = rng_from_seed(5);
        let (emb, _, own) = batch_fixture(&mut rng, vec![0]);
        let slots = BatchSlots::from_anchor_values(vec![0]);
        let sets = minibatch_sets(&slots);
        let (loss, _) = e_info_nce(&emb, &sets, &own, 0.07, 12.0).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn enhanced_matches_oracle_with_paper_constants() {
        // batch of 4 with values (v0, v0, v1, v1), tau = 0.07, mu = 12
        let mut rng = rng_from_seed(6);
        for _ in 0..100 {
            let (emb, sets, own) = batch_fixture(&mut rng, vec![0, 0, 1, 1]);
            let (loss, _) = e_info_nce(&emb, &sets, &own, 0.07, 12.0).unwrap();
            let expected = e_info_nce_oracle(&emb, &sets, &own, 0.07, 12.0, true);
            assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
        }
    }

    #[test]
    fn enhanced_is_monotone_in_mu() {
        let mut rng = rng_from_seed(7);
        for _ in 0..50 {
            let (emb, sets, own) = batch_fixture(&mut rng, vec![0, 0, 1, 2, 1, 0]);
            let mut prev = -f64::INFINITY;
            for mu in [0.0, 0.5, 1.0, 4.0, 12.0, 40.0] {
                let (loss, _) = e_info_nce(&emb, &sets, &own, 0.07, mu).unwrap();
                assert!(loss >= prev - 1e-12, "mu={mu}: {loss} < {prev}");
                prev = loss;
            }
        }
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = rng_from_seed(8);
        for _ in 0..50 {
            let (emb, sets, own) = batch_fixture(&mut rng, vec![0, 1, 0, 2]);
            let (l1, _) = info_nce(&emb, &sets, &own, 0.07).unwrap();
            let (l2, _) = e_info_nce(&emb, &sets, &own, 0.07, 12.0).unwrap();
            assert!(l1 >= 0.0);
            assert!(l2 >= 0.0);
        }
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        let mut rng = rng_from_seed(9);
        let (emb, sets, own) = batch_fixture(&mut rng, vec![0, 1]);
        assert!(info_nce(&emb, &sets, &own, 0.0).is_err());
        assert!(e_info_nce(&emb, &sets, &own, -1.0, 1.0).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(1.0, 2.0, 3.0, 0.1, 0.04) - 1.32).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 9.0, 9.0, 0.0, 0.0), 0.7);
    }

    #[test]
    fn default_config_carries_paper_constants() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.tau, 0.07);
        assert_eq!(cfg.mu, 12.0);
        assert_eq!(cfg.beta, 0.1);
        assert_eq!(cfg.gamma, 0.04);
        cfg.validate().unwrap();
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(10);
        let a = random_unit_rows(&mut rng, 3, 4);
        let p = random_unit_rows(&mut rng, 3, 4);
        let n = random_unit_rows(&mut rng, 3, 4);
        let mut x0: Vec<f64> = a.iter().copied().collect();
        x0.extend(p.iter());
        x0.extend(n.iter());
        let f = |v: &[f64]| {
            let a = Array2::from_shape_vec((3, 4), v[0..12].to_vec()).unwrap();
            let p = Array2::from_shape_vec((3, 4), v[12..24].to_vec()).unwrap();
            let n = Array2::from_shape_vec((3, 4), v[24..36].to_vec()).unwrap();
            triplet_loss(&a, &p, &n, 0.2).0
        };
        let (_, da, dp, dn) = triplet_loss(&a, &p, &n, 0.2);
        let mut analytic: Vec<f64> = da.iter().copied().collect();
        analytic.extend(dp.iter());
        analytic.extend(dn.iter());
        let err = check_fn_grad(&f, &x0, &analytic, &GradCheckCfg::default());
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn e_info_nce_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(11);
        let values = vec![0usize, 0, 1, 1];
        let (emb, sets, own) = batch_fixture(&mut rng, values);
        let n = 4;
        let dim = 6;
        let pack = |e: &BatchEmbeddings| -> Vec<f64> {
            let mut v: Vec<f64> = e.region_fg.iter().copied().collect();
            v.extend(e.region_bg.iter());
            v.extend(e.patch_fg.iter());
            v
        };
        let x0 = pack(&emb);
        let sets2 = sets.clone();
        let own2 = own.clone();
        let f = move |v: &[f64]| {
            let sz = n * dim;
            let e = BatchEmbeddings {
                region_fg: Array2::from_shape_vec((n, dim), v[0..sz].to_vec()).unwrap(),
                region_bg: Array2::from_shape_vec((n, dim), v[sz..2 * sz].to_vec()).unwrap(),
                patch_fg: Array2::from_shape_vec((n, dim), v[2 * sz..].to_vec()).unwrap(),
            };
            e_info_nce(&e, &sets2, &own2, 0.07, 12.0).unwrap().0
        };
        let (_, grads) = e_info_nce(&emb, &sets, &own, 0.07, 12.0).unwrap();
        let analytic = pack(&BatchEmbeddings {
            region_fg: grads.region_fg,
            region_bg: grads.region_bg,
            patch_fg: grads.patch_fg,
        });
        let err = check_fn_grad(&f, &x0, &analytic, &GradCheckCfg::default());
        assert!(err < 1e-4, "max rel err {err}");
    }
}

//! Pair/triplet construction and the metric-learning losses, built as
//! operation-graph fragments so gradients flow to whatever produced the
//! embeddings.
//!
//! All losses expect l2-normalized embedding rows; squared distances are
//! then `2 − 2·⟨e_i, e_j⟩` and cosine similarity is the Gram entry. Pair
//! selection is baked into constant 0/1 matrices applied to the flattened
//! Gram, which keeps the graph inside the fixed op vocabulary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("need at least 2 embeddings to form pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("no positive or negative pairs in batch")]
    NoPairs,
    #[error("no valid (anchor, positive, negative) triple in batch")]
    NoTriples,
    #[error("batch has {labels} labels for {rows} embedding rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("loss weight for order {order} missing")]
    MissingOrderWeight { order: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Exhaustive in-batch pairs, partitioned by label equality (`i < j`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub batch: usize,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

pub fn build_pairs(labels: &[usize]) -> Result<PairSet, LossError> {
    let batch = labels.len();
    if batch < 2 {
        return Err(LossError::BatchTooSmall(batch));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..batch {
        for j in (i + 1)..batch {
            if labels[i] == labels[j] {
                positives.push((i, j));
            } else {
                negatives.push((i, j));
            }
        }
    }
    Ok(PairSet {
        batch,
        positives,
        negatives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Contrastive,
    Triplet,
    Binomial,
}

/// Configuration for the base loss and the per-order weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Margin for the contrastive hinge (default 0.5) or triplet (0.2).
    #[serde(default = "LossConfig::default_margin")]
    pub margin: f64,
    #[serde(default = "LossConfig::default_alpha")]
    pub binomial_alpha: f64,
    #[serde(default = "LossConfig::default_beta")]
    pub binomial_beta: f64,
    #[serde(default = "LossConfig::default_cost")]
    pub binomial_cost: f64,
    /// λ_k for orders 2, 3, …; missing entries default to 1.
    #[serde(default)]
    pub order_weights: Vec<f64>,
}

impl LossConfig {
    fn default_margin() -> f64 {
        0.5
    }
    fn default_alpha() -> f64 {
        2.0
    }
    fn default_beta() -> f64 {
        0.5
    }
    fn default_cost() -> f64 {
        25.0
    }

    pub fn contrastive(margin: f64) -> Self {
        Self {
            kind: LossKind::Contrastive,
            margin,
            binomial_alpha: Self::default_alpha(),
            binomial_beta: Self::default_beta(),
            binomial_cost: Self::default_cost(),
            order_weights: Vec::new(),
        }
    }

    pub fn triplet(margin: f64) -> Self {
        Self {
            kind: LossKind::Triplet,
            ..Self::contrastive(margin)
        }
    }

    pub fn binomial() -> Self {
        Self {
            kind: LossKind::Binomial,
            ..Self::contrastive(Self::default_margin())
        }
    }

    /// λ for a given sketch order (≥ 2); defaults to 1.
    pub fn order_weight(&self, order: usize) -> f64 {
        self.order_weights.get(order - 2).copied().unwrap_or(1.0)
    }
}

/// 0/1 selection matrix `pairs.len() × B²` that picks pair entries out of a
/// flattened `B×B` Gram or distance matrix.
fn selection_tensor<T: Real>(pairs: &[(usize, usize)], batch: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); pairs.len() * batch * batch];
    for (row, &(i, j)) in pairs.iter().enumerate() {
        data[row * batch * batch + i * batch + j] = T::one();
    }
    Tensor::new(vec![pairs.len(), batch * batch], data).expect("selection shape")
}

/// Gram matrix node `E·Eᵀ` of `(B, E)` embeddings.
fn gram_node<T: Real>(g: &mut Graph<T>, embeddings: NodeId) -> Result<NodeId, GraphError> {
    g.matmul(embeddings, embeddings, false, true)
}

/// Flattened squared-distance node `D²_ij = 2 − 2·G_ij` as a `(B², 1)` column.
fn sqdist_column<T: Real>(
    g: &mut Graph<T>,
    embeddings: NodeId,
    batch: usize,
) -> Result<NodeId, GraphError> {
    let gram = gram_node(g, embeddings)?;
    let neg2 = g.scale(gram, -2.0);
    let two = g.constant(Tensor::full(&[batch, batch], T::cast(2.0)));
    let d2 = g.add(neg2, two)?;
    g.reshape(d2, &[batch * batch, 1])
}

/// Mean of all entries of a `(n, 1)` column node.
fn column_mean<T: Real>(g: &mut Graph<T>, column: NodeId) -> Result<NodeId, GraphError> {
    g.mean_axes(column, &[0, 1])
}

/// Contrastive loss: mean over positives of `‖e_i−e_j‖²` plus mean over
/// negatives of `max(0, margin − ‖e_i−e_j‖)²`.
pub fn contrastive_loss_node<T: Real>(
    g: &mut Graph<T>,
    embeddings: NodeId,
    pairs: &PairSet,
    margin: f64,
) -> Result<NodeId, LossError> {
    if pairs.positives.is_empty() && pairs.negatives.is_empty() {
        return Err(LossError::NoPairs);
    }
    let batch = pairs.batch;
    let d2 = sqdist_column(g, embeddings, batch)?;
    let mut terms = Vec::new();
    if !pairs.positives.is_empty() {
        let sel = g.constant(selection_tensor(&pairs.positives, batch));
        let pos = g.matmul(sel, d2, false, false)?;
        terms.push(column_mean(g, pos)?);
    }
    if !pairs.negatives.is_empty() {
        let sel = g.constant(selection_tensor(&pairs.negatives, batch));
        let neg_sq = g.matmul(sel, d2, false, false)?;
        let dist = g.sqrt(neg_sq);
        let neg_dist = g.scale(dist, -1.0);
        let m = g.constant(Tensor::full(&[pairs.negatives.len(), 1], T::cast(margin)));
        let hinge = g.add(neg_dist, m)?;
        let act = g.relu(hinge);
        let sq = g.square(act);
        terms.push(column_mean(g, sq)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Triplet loss: mean over all in-batch (anchor, positive, negative)
/// triples of `max(0, ‖a−p‖² − ‖a−n‖² + margin)`.
pub fn triplet_loss_node<T: Real>(
    g: &mut Graph<T>,
    embeddings: NodeId,
    labels: &[usize],
    margin: f64,
) -> Result<NodeId, LossError> {
    let batch = labels.len();
    if batch < 2 {
        return Err(LossError::BatchTooSmall(batch));
    }
    let d2 = sqdist_column(g, embeddings, batch)?;
    let mut sums = Vec::new();
    let mut triples = 0usize;
    for anchor in 0..batch {
        let pos: Vec<(usize, usize)> = (0..batch)
            .filter(|&p| p != anchor && labels[p] == labels[anchor])
            .map(|p| (anchor, p))
            .collect();
        let neg: Vec<(usize, usize)> = (0..batch)
            .filter(|&n| labels[n] != labels[anchor])
            .map(|n| (anchor, n))
            .collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        triples += pos.len() * neg.len();
        let sel_p = g.constant(selection_tensor(&pos, batch));
        let sel_n = g.constant(selection_tensor(&neg, batch));
        let dp = g.matmul(sel_p, d2, false, false)?; // (|P|, 1)
        let dn = g.matmul(sel_n, d2, false, false)?; // (|N|, 1)
        let ones_n = g.constant(Tensor::full(&[1, neg.len()], T::one()));
        let ones_p = g.constant(Tensor::full(&[pos.len(), 1], T::one()));
        let ap = g.matmul(dp, ones_n, false, false)?; // (|P|, |N|) of d²_ap
        let an = g.matmul(ones_p, dn, false, true)?; // (|P|, |N|) of d²_an
        let neg_an = g.scale(an, -1.0);
        let diff = g.add(ap, neg_an)?;
        let m = g.constant(Tensor::full(&[pos.len(), neg.len()], T::cast(margin)));
        let shifted = g.add(diff, m)?;
        let act = g.relu(shifted);
        sums.push(g.sum(act));
    }
    if triples == 0 {
        return Err(LossError::NoTriples);
    }
    let mut total = sums[0];
    for &s in &sums[1..] {
        total = g.add(total, s)?;
    }
    Ok(g.scale(total, 1.0 / triples as f64))
}

/// Binomial deviance: mean over positives of `log(1+e^{−α(s−β)})` plus
/// `C ·` mean over negatives of `log(1+e^{α(s−β)})`, with `s` the cosine.
pub fn binomial_deviance_loss_node<T: Real>(
    g: &mut Graph<T>,
    embeddings: NodeId,
    pairs: &PairSet,
    alpha: f64,
    beta: f64,
    cost: f64,
) -> Result<NodeId, LossError> {
    if pairs.positives.is_empty() && pairs.negatives.is_empty() {
        return Err(LossError::NoPairs);
    }
    let batch = pairs.batch;
    let gram = gram_node(g, embeddings)?;
    let s_col = g.reshape(gram, &[batch * batch, 1])?;
    let mut deviance = |sel_pairs: &[(usize, usize)], sign: f64| -> Result<NodeId, LossError> {
        let sel = g.constant(selection_tensor::<T>(sel_pairs, batch));
        let s = g.matmul(sel, s_col, false, false)?;
        let minus_beta = g.constant(Tensor::full(&[sel_pairs.len(), 1], T::cast(-beta)));
        let centered = g.add(s, minus_beta)?;
        let z = g.scale(centered, sign * alpha);
        let e = g.exp(z);
        let one = g.constant(Tensor::full(&[sel_pairs.len(), 1], T::one()));
        let lifted = g.add(e, one)?;
        let l = g.log(lifted);
        Ok(column_mean(g, l)?)
    };
    let mut terms = Vec::new();
    if !pairs.positives.is_empty() {
        terms.push(deviance(&pairs.positives, -1.0)?);
    }
    if !pairs.negatives.is_empty() {
        let neg = deviance(&pairs.negatives, 1.0)?;
        terms.push(g.scale(neg, cost));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Base loss dispatch on embeddings with the given labels.
pub fn dml_loss_node<T: Real>(
    g: &mut Graph<T>,
    cfg: &LossConfig,
    embeddings: NodeId,
    labels: &[usize],
) -> Result<NodeId, LossError> {
    match cfg.kind {
        LossKind::Contrastive => {
            let pairs = build_pairs(labels)?;
            contrastive_loss_node(g, embeddings, &pairs, cfg.margin)
        }
        LossKind::Triplet => triplet_loss_node(g, embeddings, labels, cfg.margin),
        LossKind::Binomial => {
            let pairs = build_pairs(labels)?;
            binomial_deviance_loss_node(
                g,
                embeddings,
                &pairs,
                cfg.binomial_alpha,
                cfg.binomial_beta,
                cfg.binomial_cost,
            )
        }
    }
}

/// Per-order losses and their weighted sum.
pub struct HordeLossNodes {
    pub total: NodeId,
    /// One loss node per entry of `order_embeddings`, in order.
    pub per_order: Vec<NodeId>,
}

/// `Σ_k λ_k · L_k` over the per-order embeddings (orders 2, 3, … in list
/// order), each with the same pair structure and loss form.
pub fn horde_loss_node<T: Real>(
    g: &mut Graph<T>,
    cfg: &LossConfig,
    order_embeddings: &[NodeId],
    labels: &[usize],
) -> Result<HordeLossNodes, LossError> {
    if order_embeddings.is_empty() {
        return Err(LossError::NoPairs);
    }
    let mut per_order = Vec::with_capacity(order_embeddings.len());
    let mut weighted = Vec::with_capacity(order_embeddings.len());
    for (idx, &emb) in order_embeddings.iter().enumerate() {
        let order = idx + 2;
        let loss = dml_loss_node(g, cfg, emb, labels)?;
        per_order.push(loss);
        weighted.push(g.scale(loss, cfg.order_weight(order)));
    }
    let mut total = weighted[0];
    for &w in &weighted[1..] {
        total = g.add(total, w)?;
    }
    Ok(HordeLossNodes { total, per_order })
}

/// `L = L_dml + L_orders`; gradient flows to both branches.
pub fn total_loss_node<T: Real>(
    g: &mut Graph<T>,
    dml: NodeId,
    horde: Option<NodeId>,
) -> Result<NodeId, GraphError> {
    match horde {
        Some(h) => g.add(dml, h),
        None => Ok(dml),
    }
}

/// Evaluate a loss on concrete embeddings through a throwaway graph.
pub fn eval_loss_value<T: Real>(
    cfg: &LossConfig,
    embeddings: &Tensor<T>,
    labels: &[usize],
) -> Result<T, LossError> {
    if embeddings.shape()[0] != labels.len() {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            rows: embeddings.shape()[0],
        });
    }
    let mut g = Graph::new();
    let e = g.input("embeddings", embeddings.shape())?;
    let loss = dml_loss_node(&mut g, cfg, e, labels)?;
    g.mark_output("loss", loss);
    let out = g.forward(&[("embeddings", embeddings)])?;
    Ok(out["loss"].item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[&[f64]]) -> Tensor<f64> {
        let cols = data[0].len();
        let flat: Vec<f64> = data.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_rows(data.len(), cols, &flat).unwrap()
    }

    #[test]
    fn pairs_enumeration() {
        let p = build_pairs(&[0, 0, 1]).unwrap();
        assert_eq!(p.positives, vec![(0, 1)]);
        assert_eq!(p.negatives, vec![(0, 2), (1, 2)]);
    }

    #[test]
    fn pairs_all_same_label() {
        let p = build_pairs(&[3, 3, 3]).unwrap();
        assert_eq!(p.positives.len(), 3);
        assert!(p.negatives.is_empty());
        assert!(matches!(build_pairs(&[0]), Err(LossError::BatchTooSmall(1))));
    }

    #[test]
    fn pairs_cover_all_combinations_for_p5_q8() {
        let labels: Vec<usize> = (0..5).flat_map(|c| std::iter::repeat(c).take(8)).collect();
        let p = build_pairs(&labels).unwrap();
        // 5·C(8,2) positives; C(40,2) − positives negatives
        assert_eq!(p.positives.len(), 5 * 28);
        assert_eq!(p.negatives.len(), 40 * 39 / 2 - 140);
        assert_eq!(p.positives.len() + p.negatives.len(), 40 * 39 / 2);
    }

    #[test]
    fn contrastive_identical_positive_contributes_zero() {
        // two identical embeddings, same label: only a positive pair at d=0
        let e = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let v = eval_loss_value(&LossConfig::contrastive(0.5), &e, &[0, 0]).unwrap();
        assert!(v.abs() <= 1e-12);
    }

    #[test]
    fn contrastive_far_negative_contributes_zero() {
        // ‖(1,0)−(0,1)‖ = √2 > margin 0.5 → hinge inactive
        let e = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = eval_loss_value(&LossConfig::contrastive(0.5), &e, &[0, 1]).unwrap();
        assert!(v.abs() <= 1e-12, "loss {v}");
    }

    #[test]
    fn contrastive_near_negative_pays_hinge() {
        let e = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let v = eval_loss_value(&LossConfig::contrastive(0.5), &e, &[0, 1]).unwrap();
        // distance 0 → (0.5 − 0)² = 0.25
        assert!((v - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn triplet_satisfied_margin_is_zero() {
        // p = a, n at squared distance 2 ≥ margin
        let e = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0]]);
        let v = eval_loss_value(&LossConfig::triplet(0.2), &e, &[0, 0, 1]).unwrap();
        assert!(v.abs() <= 1e-12, "loss {v}");
    }

    #[test]
    fn triplet_degenerate_all_equal_pays_margin() {
        let e = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let v = eval_loss_value(&LossConfig::triplet(0.2), &e, &[0, 0, 1]).unwrap();
        assert!((v - 0.2).abs() <= 1e-12, "loss {v}");
    }

    #[test]
    fn triplet_without_positives_errors() {
        let e = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let err = eval_loss_value(&LossConfig::triplet(0.2), &e, &[0, 1, 2]).unwrap_err();
        assert!(matches!(err, LossError::NoTriples));
    }

    #[test]
    fn binomial_hand_values() {
        // positive with s = 1: log(1+e^{−α(1−β)}) = log(1+e^{−1}) at α=2, β=0.5
        let e = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let v = eval_loss_value(&LossConfig::binomial(), &e, &[0, 0]).unwrap();
        assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() <= 1e-12);
        // negative with s = −1: C·log(1+e^{α(−1−β)}) = 25·log(1+e^{−3})
        let e = rows(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let v = eval_loss_value(&LossConfig::binomial(), &e, &[0, 1]).unwrap();
        let expected = 25.0 * (1.0 + (-3.0f64).exp()).ln();
        assert!((v - expected).abs() <= 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn binomial_saturates_for_large_alpha() {
        // well-separated pairs → loss → 0 as α grows
        let e = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0]]);
        let mut cfg = LossConfig::binomial();
        cfg.binomial_alpha = 50.0;
        let v = eval_loss_value(&cfg, &e, &[0, 0, 1]).unwrap();
        assert!(v < 1e-9, "loss {v}");
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let e = rows(&[
            &[1.0, 0.0],
            &[0.8, 0.6],
            &[0.0, 1.0],
            &[-0.6, 0.8],
        ]);
        let labels = [0usize, 0, 1, 1];
        let perm = [2usize, 0, 3, 1];
        let permuted_rows: Vec<&[f64]> = perm
            .iter()
            .map(|&i| &e.data()[i * 2..(i + 1) * 2])
            .collect();
        let pe = rows(&permuted_rows);
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        for cfg in [
            LossConfig::contrastive(0.5),
            LossConfig::triplet(0.2),
            LossConfig::binomial(),
        ] {
            let a = eval_loss_value(&cfg, &e, &labels).unwrap();
            let b = eval_loss_value(&cfg, &pe, &plabels).unwrap();
            assert!(
                (a - b).abs() <= 1e-12 * a.abs().max(1.0),
                "{cfg:?}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn losses_ignore_label_identity() {
        let e = rows(&[&[1.0, 0.0], &[0.8, 0.6], &[0.0, 1.0], &[-0.6, 0.8]]);
        for cfg in [
            LossConfig::contrastive(0.5),
            LossConfig::triplet(0.2),
            LossConfig::binomial(),
        ] {
            let a = eval_loss_value(&cfg, &e, &[0, 0, 1, 1]).unwrap();
            let b = eval_loss_value(&cfg, &e, &[7, 7, 3, 3]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn horde_sum_decomposes_additively() {
        // K=5: weighted total equals the sum of 4 single-order evaluations
        let labels = [0usize, 0, 1, 1];
        let cfg = LossConfig::contrastive(0.5);
        let mats: Vec<Tensor<f64>> = (0..4)
            .map(|k| {
                let data: Vec<f64> = (0..4 * 3)
                    .map(|i| ((i + k * 7) as f64 * 0.37).sin())
                    .collect();
                Tensor::from_rows(4, 3, &data).unwrap()
            })
            .collect();
        let mut g = Graph::<f64>::new();
        let mut order_nodes = Vec::new();
        for (i, m) in mats.iter().enumerate() {
            let c = g.constant(m.clone());
            let n = g.l2_normalize(c).unwrap();
            let _ = i;
            order_nodes.push(n);
        }
        let horde = horde_loss_node(&mut g, &cfg, &order_nodes, &labels).unwrap();
        g.mark_output("total", horde.total);
        let total = g.forward(&[]).unwrap()["total"].item();
        let mut expected = 0.0;
        for m in &mats {
            let mut norm = m.clone();
            for row in norm.data_mut().chunks_mut(3) {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|v| *v /= n);
            }
            expected += eval_loss_value(&cfg, &norm, &labels).unwrap();
        }
        assert!((total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn horde_zero_weight_vanishes() {
        let labels = [0usize, 0, 1];
        let mut cfg = LossConfig::contrastive(0.5);
        cfg.order_weights = vec![0.0];
        let e = rows(&[&[1.0, 0.0], &[0.9, 0.435889894354067], &[0.0, 1.0]]);
        let mut g = Graph::<f64>::new();
        let c = g.constant(e);
        let n = g.l2_normalize(c).unwrap();
        let horde = horde_loss_node(&mut g, &cfg, &[n], &labels).unwrap();
        g.mark_output("total", horde.total);
        let total = g.forward(&[]).unwrap()["total"].item();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn horde_flags_unseparated_negatives() {
        // identical embeddings across the batch with a negative pair present
        let e = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let labels = [0usize, 0, 1];
        let mut g = Graph::<f64>::new();
        let c = g.constant(e);
        let horde =
            horde_loss_node(&mut g, &LossConfig::contrastive(0.5), &[c, c], &labels).unwrap();
        g.mark_output("total", horde.total);
        let total = g.forward(&[]).unwrap()["total"].item();
        assert!(total > 0.0);
    }

    #[test]
    fn total_loss_is_plain_sum() {
        let mut g = Graph::<f64>::new();
        let a = g.scalar_const(0.7);
        let dml = g.sum(a);
        let total = total_loss_node(&mut g, dml, None).unwrap();
        g.mark_output("total", total);
        assert_eq!(g.forward(&[]).unwrap()["total"].item(), 0.7);
    }
}

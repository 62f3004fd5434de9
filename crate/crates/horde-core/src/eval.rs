//! Retrieval and diagnostic evaluation: Recall@K, the spatial-subsampling
//! robustness probe, within-class scatter statistics, and the
//! concatenate-then-PCA evaluation mode.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{first_order_representation, EmbeddingHead};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty query or gallery set")]
    EmptySet,
    #[error("recall K = {k} must be smaller than the gallery size {gallery}")]
    KTooLarge { k: usize, gallery: usize },
    #[error("query dim {query} does not match gallery dim {gallery}")]
    DimMismatch { query: usize, gallery: usize },
    #[error("{what} has {got} labels for {expected} rows")]
    LabelCount {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("subsample fraction rho = {0} outside (0, 1]")]
    BadRho(f64),
    #[error("scatter ratio needs ≥ 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("total feature covariance is degenerate (all features identical)")]
    DegenerateFeatures,
    #[error("PCA needs rank ≥ {needed}, concatenated data achieves {achievable}")]
    RankDeficient { needed: usize, achievable: usize },
    #[error("concatenated blocks disagree on row count: {0:?}")]
    BlockRows(Vec<usize>),
}

/// Recall@K values plus the top-1 neighbor of each query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub recall_at: BTreeMap<usize, f64>,
    pub nearest: Vec<usize>,
    pub dim: usize,
}

/// Fraction of queries whose K nearest gallery neighbors (Euclidean)
/// contain at least one same-label item. With `exclude_self`, gallery
/// index `q` is skipped for query `q` (shared query/gallery protocol).
pub fn recall_at_k<T: Real>(
    query: &Tensor<T>,
    gallery: &Tensor<T>,
    query_labels: &[usize],
    gallery_labels: &[usize],
    ks: &[usize],
    exclude_self: bool,
) -> Result<RetrievalResult, EvalError> {
    let nq = query.shape()[0];
    let ng = gallery.shape()[0];
    if nq == 0 || ng == 0 {
        return Err(EvalError::EmptySet);
    }
    let dq = query.len() / nq;
    let dg = gallery.len() / ng;
    if dq != dg {
        return Err(EvalError::DimMismatch {
            query: dq,
            gallery: dg,
        });
    }
    if query_labels.len() != nq {
        return Err(EvalError::LabelCount {
            what: "query",
            expected: nq,
            got: query_labels.len(),
        });
    }
    if gallery_labels.len() != ng {
        return Err(EvalError::LabelCount {
            what: "gallery",
            expected: ng,
            got: gallery_labels.len(),
        });
    }
    let effective_gallery = if exclude_self { ng - 1 } else { ng };
    let max_k = ks.iter().copied().max().unwrap_or(1);
    if max_k > effective_gallery {
        return Err(EvalError::KTooLarge {
            k: max_k,
            gallery: effective_gallery,
        });
    }

    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut nearest = Vec::with_capacity(nq);
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for q in 0..nq {
        let qv = &query.data()[q * dq..(q + 1) * dq];
        let mut dist: Vec<T> = Vec::with_capacity(ng);
        for g in 0..ng {
            let gv = &gallery.data()[g * dg..(g + 1) * dg];
            let d: T = qv
                .iter()
                .zip(gv)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            dist.push(d);
        }
        order.clear();
        order.extend(0..ng);
        if exclude_self {
            order.retain(|&g| g != q);
        }
        // ties broken by gallery index for determinism
        order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));
        nearest.push(order[0]);
        for (&k, hit) in hits.iter_mut() {
            if order[..k]
                .iter()
                .any(|&g| gallery_labels[g] == query_labels[q])
            {
                *hit += 1;
            }
        }
    }
    Ok(RetrievalResult {
        recall_at: hits
            .into_iter()
            .map(|(k, h)| (k, h as f64 / nq as f64))
            .collect(),
        nearest,
        dim: dq,
    })
}

/// Ratio of mean within-class covariance trace to total covariance trace
/// over individual feature vectors tagged with their image's class.
pub fn scatter_ratio<T: Real>(features: &[Vec<T>], labels: &[usize]) -> Result<f64, EvalError> {
    if features.len() != labels.len() {
        return Err(EvalError::LabelCount {
            what: "features",
            expected: features.len(),
            got: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut class_counts = vec![0usize; num_classes];
    for &l in labels {
        class_counts[l] += 1;
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| class_counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(EvalError::TooFewClasses(present.len()));
    }
    let dim = features[0].len();
    // class means and the global mean
    let mut class_means = vec![vec![0.0f64; dim]; num_classes];
    let mut global_mean = vec![0.0f64; dim];
    for (f, &l) in features.iter().zip(labels) {
        for (i, v) in f.iter().enumerate() {
            let v = v.to_f64().expect("finite");
            class_means[l][i] += v;
            global_mean[i] += v;
        }
    }
    for (&c, count) in present.iter().map(|c| (c, class_counts[*c])) {
        for v in &mut class_means[c] {
            *v /= count as f64;
        }
    }
    for v in &mut global_mean {
        *v /= features.len() as f64;
    }
    // traces: mean squared deviation from the relevant mean
    let mut within_per_class = vec![0.0f64; num_classes];
    let mut total = 0.0f64;
    for (f, &l) in features.iter().zip(labels) {
        let mut w = 0.0;
        let mut t = 0.0;
        for (i, v) in f.iter().enumerate() {
            let v = v.to_f64().expect("finite");
            w += (v - class_means[l][i]).powi(2);
            t += (v - global_mean[i]).powi(2);
        }
        within_per_class[l] += w;
        total += t;
    }
    let total = total / features.len() as f64;
    if total <= 1e-24 {
        return Err(EvalError::DegenerateFeatures);
    }
    let within: f64 = present
        .iter()
        .map(|&c| within_per_class[c] / class_counts[c] as f64)
        .sum::<f64>()
        / present.len() as f64;
    Ok(within / total)
}

/// Outcome of the feature-subsampling robustness probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub rho: f64,
    pub kept_positions: usize,
    pub recall_full: BTreeMap<usize, f64>,
    pub recall_sub: BTreeMap<usize, f64>,
    /// `recall_full@1 − recall_sub@1`.
    pub degradation: f64,
    pub scatter_ratio: f64,
}

/// For each image keep `⌈ρ·h·w⌉` spatial positions (uniform, without
/// replacement, seeded), pool only those, embed, and evaluate retrieval;
/// the full-feature baseline comes from the same pooling path so ρ = 1
/// reproduces it bitwise.
pub fn subsample_probe<T: Real>(
    features: &Tensor<T>,
    head: &EmbeddingHead<T>,
    labels: &[usize],
    rho: f64,
    seed: u64,
    ks: &[usize],
) -> Result<ProbeResult, EvalError> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(EvalError::BadRho(rho));
    }
    let n = features.shape()[0];
    if n != labels.len() {
        return Err(EvalError::LabelCount {
            what: "features",
            expected: n,
            got: labels.len(),
        });
    }
    let c = *features.shape().last().expect("channels");
    let positions = features.len() / (n * c);
    let keep = ((rho * positions as f64).ceil() as usize).clamp(1, positions);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut full = Vec::with_capacity(n * head.output_dim());
    let mut sub = Vec::with_capacity(n * head.output_dim());
    let mut pooled_features: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut all: Vec<usize> = (0..positions).collect();
    for img in 0..n {
        let fmap = &features.data()[img * positions * c..(img + 1) * positions * c];
        // full pooling in canonical position order
        let full_mean = mean_positions(fmap, c, (0..positions).collect::<Vec<_>>().as_slice());
        full.extend_from_slice(&head.apply(&full_mean));
        pooled_features.push(full_mean);
        let chosen: Vec<usize> = if keep == positions {
            (0..positions).collect()
        } else {
            all.shuffle(&mut rng);
            let mut picked = all[..keep].to_vec();
            picked.sort_unstable();
            picked
        };
        let sub_mean = mean_positions(fmap, c, &chosen);
        sub.extend_from_slice(&head.apply(&sub_mean));
    }
    let e = head.output_dim();
    let full_t = Tensor::new(vec![n, e], full).expect("embedding shape");
    let sub_t = Tensor::new(vec![n, e], sub).expect("embedding shape");

    let mut ks_with_1: Vec<usize> = ks.to_vec();
    if !ks_with_1.contains(&1) {
        ks_with_1.push(1);
    }
    let full_res = recall_at_k(&full_t, &full_t, labels, labels, &ks_with_1, true)?;
    let sub_res = recall_at_k(&sub_t, &sub_t, labels, labels, &ks_with_1, true)?;
    let degradation = full_res.recall_at[&1] - sub_res.recall_at[&1];

    // scatter over individual positions, tagged by image class
    let mut pos_features = Vec::with_capacity(n * positions);
    let mut pos_labels = Vec::with_capacity(n * positions);
    for img in 0..n {
        let fmap = &features.data()[img * positions * c..(img + 1) * positions * c];
        for p in 0..positions {
            pos_features.push(fmap[p * c..(p + 1) * c].to_vec());
            pos_labels.push(labels[img]);
        }
    }
    let scatter = scatter_ratio(&pos_features, &pos_labels)?;

    Ok(ProbeResult {
        rho,
        kept_positions: keep,
        recall_full: full_res.recall_at,
        recall_sub: sub_res.recall_at,
        degradation,
        scatter_ratio: scatter,
    })
}

fn mean_positions<T: Real>(fmap: &[T], c: usize, positions: &[usize]) -> Vec<T> {
    let mut acc = vec![T::zero(); c];
    for &p in positions {
        for (a, &v) in acc.iter_mut().zip(&fmap[p * c..(p + 1) * c]) {
            *a += v;
        }
    }
    let inv = T::one() / T::cast(positions.len() as f64);
    for a in &mut acc {
        *a = *a * inv;
    }
    acc
}

/// Pool a feature tensor `(n, …, c)` into per-image mean vectors using the
/// same position order as the probe's full path.
pub fn pool_feature_maps<T: Real>(features: &Tensor<T>) -> Vec<Vec<T>> {
    let n = features.shape()[0];
    let c = *features.shape().last().expect("channels");
    let positions = features.len() / (n * c);
    (0..n)
        .map(|img| {
            let fmap = &features.data()[img * positions * c..(img + 1) * positions * c];
            first_order_representation(
                &Tensor::new(vec![positions, c], fmap.to_vec()).expect("fmap"),
            )
        })
        .collect()
}

/// Concatenate per-order representation blocks, fit PCA on the gallery,
/// project to `target_dim`, l2-normalize, and evaluate retrieval with
/// self-match exclusion.
pub fn concat_pca_eval<T: Real>(
    blocks: &[Tensor<T>],
    target_dim: usize,
    labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalResult, EvalError> {
    if blocks.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let n = blocks[0].shape()[0];
    if blocks.iter().any(|b| b.shape()[0] != n) {
        return Err(EvalError::BlockRows(
            blocks.iter().map(|b| b.shape()[0]).collect(),
        ));
    }
    let dims: Vec<usize> = blocks.iter().map(|b| b.len() / n).collect();
    let total: usize = dims.iter().sum();
    if total < target_dim {
        return Err(EvalError::RankDeficient {
            needed: target_dim,
            achievable: total,
        });
    }
    // concatenate rows
    let mut concat = vec![0.0f64; n * total];
    for row in 0..n {
        let mut offset = 0;
        for (block, &dim) in blocks.iter().zip(&dims) {
            for i in 0..dim {
                concat[row * total + offset + i] =
                    block.data()[row * dim + i].to_f64().expect("finite");
            }
            offset += dim;
        }
    }
    // center
    let mut mean = vec![0.0f64; total];
    for row in 0..n {
        for i in 0..total {
            mean[i] += concat[row * total + i];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    for row in 0..n {
        for i in 0..total {
            concat[row * total + i] -= mean[i];
        }
    }
    // covariance (total × total)
    let mut cov = vec![0.0f64; total * total];
    for row in 0..n {
        let x = &concat[row * total..(row + 1) * total];
        for i in 0..total {
            for j in i..total {
                cov[i * total + j] += x[i] * x[j];
            }
        }
    }
    for i in 0..total {
        for j in 0..i {
            cov[i * total + j] = cov[j * total + i];
        }
    }
    for v in &mut cov {
        *v /= n as f64;
    }
    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov, total);
    let max_eig = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let rank = eigenvalues
        .iter()
        .filter(|&&v| v > max_eig * 1e-12 && v > 1e-24)
        .count();
    if rank < target_dim {
        return Err(EvalError::RankDeficient {
            needed: target_dim,
            achievable: rank,
        });
    }
    // project onto the top components and l2-normalize
    let mut projected = vec![T::zero(); n * target_dim];
    for row in 0..n {
        let x = &concat[row * total..(row + 1) * total];
        let mut out = vec![0.0f64; target_dim];
        for (k, o) in out.iter_mut().enumerate() {
            let v = &eigenvectors[k * total..(k + 1) * total];
            *o = x.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (k, o) in out.iter().enumerate() {
            projected[row * target_dim + k] = T::cast(o / norm);
        }
    }
    let emb = Tensor::new(vec![n, target_dim], projected).expect("projected shape");
    recall_at_k(&emb, &emb, labels, labels, ks, true)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// eigenvalues in descending order and the matching eigenvectors as rows.
fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[p * n + k];
                    let vkq = v[q * n + k];
                    v[p * n + k] = c * vkp - s * vkq;
                    v[q * n + k] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y * n + y].partial_cmp(&a[x * n + x]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigenvectors = vec![0.0f64; n * n];
    for (row, &i) in order.iter().enumerate() {
        eigenvectors[row * n..(row + 1) * n].copy_from_slice(&v[i * n..(i + 1) * n]);
    }
    (eigenvalues, eigenvectors)
}

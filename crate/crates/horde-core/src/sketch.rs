//! Random Maclaurin sketches of high-order moments.
//!
//! A stack of Rademacher matrices `W_1..W_K ∈ R^{c×d}` turns a feature
//! vector into per-order sketches whose inner products estimate polynomial
//! kernels: with the `1/√d` normalization folded into the order-2 sketch
//! once, `⟨φ_k(x), φ_k(y)⟩` estimates `⟨x,y⟩^k` directly and the cascade
//! `φ_k = φ_{k−1} ⊙ (W_kᵀx)` reuses one matrix per order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("stack dimensions must be positive (c = {c}, d = {d}, k = {k})")]
    BadDims { c: usize, d: usize, k: usize },
    #[error("sketch order {order} outside supported range 2..={max}")]
    OrderOutOfRange { order: usize, max: usize },
    #[error("feature has length {got}, stack expects {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("sketch vectors have different lengths: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty feature set")]
    EmptyFeatures,
    #[error("matrix {index} has shape {got:?}, expected {expected:?}")]
    MatrixShape {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// The matrices `W_1..W_K` defining a Maclaurin sketch of max order `K`.
#[derive(Debug, Clone)]
pub struct ProjectorStack<T> {
    c: usize,
    d: usize,
    matrices: Vec<Tensor<T>>,
    trainable: bool,
    seed: u64,
}

impl<T: Real> ProjectorStack<T> {
    /// Sample a fresh stack with i.i.d. entries uniform on `{−1, +1}`.
    pub fn sample_rademacher(
        c: usize,
        d: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self, SketchError> {
        if c == 0 || d == 0 || k == 0 {
            return Err(SketchError::BadDims { c, d, k });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let one = T::one();
        let matrices = (0..k)
            .map(|_| {
                let data: Vec<T> = (0..c * d)
                    .map(|_| if rng.gen::<bool>() { one } else { -one })
                    .collect();
                Tensor::new(vec![c, d], data).expect("sampled shape")
            })
            .collect();
        Ok(Self {
            c,
            d,
            matrices,
            trainable: false,
            seed,
        })
    }

    /// Build a stack from explicit matrices (all `c×d`).
    pub fn from_matrices(matrices: Vec<Tensor<T>>, seed: u64) -> Result<Self, SketchError> {
        if matrices.is_empty() {
            return Err(SketchError::BadDims { c: 0, d: 0, k: 0 });
        }
        let expected = matrices[0].shape().to_vec();
        if expected.len() != 2 || expected.iter().any(|&e| e == 0) {
            return Err(SketchError::MatrixShape {
                index: 0,
                expected: vec![0, 0],
                got: expected,
            });
        }
        for (index, m) in matrices.iter().enumerate() {
            if m.shape() != expected.as_slice() {
                return Err(SketchError::MatrixShape {
                    index,
                    expected,
                    got: m.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            c: expected[0],
            d: expected[1],
            matrices,
            trainable: false,
            seed,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.c
    }

    pub fn sketch_dim(&self) -> usize {
        self.d
    }

    /// Highest order the stack supports.
    pub fn orders(&self) -> usize {
        self.matrices.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// `W_k` for `k = 1..=orders`.
    pub fn matrix(&self, k: usize) -> &Tensor<T> {
        &self.matrices[k - 1]
    }

    pub fn matrices(&self) -> &[Tensor<T>] {
        &self.matrices
    }

    /// Replace `W_k` (used when reloading trained stacks).
    pub fn set_matrix(&mut self, k: usize, m: Tensor<T>) -> Result<(), SketchError> {
        if m.shape() != [self.c, self.d] {
            return Err(SketchError::MatrixShape {
                index: k - 1,
                expected: vec![self.c, self.d],
                got: m.shape().to_vec(),
            });
        }
        self.matrices[k - 1] = m;
        Ok(())
    }

    /// `W_kᵀ x` accumulated in row order.
    fn project(&self, k: usize, x: &[T]) -> Vec<T> {
        let w = self.matrices[k - 1].data();
        let mut out = vec![T::zero(); self.d];
        for (i, &xi) in x.iter().enumerate() {
            let row = &w[i * self.d..(i + 1) * self.d];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        out
    }
}

fn check_order<T: Real>(
    x: &[T],
    stack: &ProjectorStack<T>,
    order: usize,
) -> Result<(), SketchError> {
    if x.len() != stack.feature_dim() {
        return Err(SketchError::FeatureLength {
            expected: stack.feature_dim(),
            got: x.len(),
        });
    }
    if order < 2 || order > stack.orders() {
        // order 1 is the plain sample mean, not a sketch
        return Err(SketchError::OrderOutOfRange {
            order,
            max: stack.orders(),
        });
    }
    Ok(())
}

/// Direct order-`k` sketch `(1/√d)·(W_1ᵀx) ⊙ … ⊙ (W_kᵀx)`.
pub fn rm_sketch_direct<T: Real>(
    x: &[T],
    stack: &ProjectorStack<T>,
    order: usize,
) -> Result<Vec<T>, SketchError> {
    check_order(x, stack, order)?;
    let scale = T::one() / T::cast((stack.sketch_dim() as f64).sqrt());
    let mut acc = stack.project(1, x);
    for v in &mut acc {
        *v = *v * scale;
    }
    for k in 2..=order {
        let z = stack.project(k, x);
        for (a, b) in acc.iter_mut().zip(&z) {
            *a = *a * *b;
        }
    }
    Ok(acc)
}

/// All sketches of orders `2..=max_order` via the shared-matrix recursion:
/// `φ_2 = (1/√d)(W_1ᵀx)⊙(W_2ᵀx)`, `φ_k = φ_{k−1} ⊙ (W_kᵀx)`.
pub fn cascade_sketches<T: Real>(
    x: &[T],
    stack: &ProjectorStack<T>,
    max_order: usize,
) -> Result<Vec<Vec<T>>, SketchError> {
    check_order(x, stack, max_order)?;
    let scale = T::one() / T::cast((stack.sketch_dim() as f64).sqrt());
    let z1 = stack.project(1, x);
    let z2 = stack.project(2, x);
    let mut current: Vec<T> = z1
        .iter()
        .zip(&z2)
        .map(|(&a, &b)| a * b * scale)
        .collect();
    let mut out = Vec::with_capacity(max_order - 1);
    out.push(current.clone());
    for k in 3..=max_order {
        let z = stack.project(k, x);
        for (a, b) in current.iter_mut().zip(&z) {
            *a = *a * *b;
        }
        out.push(current.clone());
    }
    Ok(out)
}

/// Inner product of two sketches; estimates `⟨x,y⟩^k` when both carry the
/// folded `1/√d` normalization.
pub fn polykernel_estimate<T: Real>(sx: &[T], sy: &[T]) -> Result<T, SketchError> {
    if sx.len() != sy.len() {
        return Err(SketchError::LengthMismatch {
            left: sx.len(),
            right: sy.len(),
        });
    }
    Ok(sx.iter().zip(sy).map(|(&a, &b)| a * b).sum())
}

/// Mean of order-`k` sketches over a feature set (empirical moment sketch).
pub fn empirical_moment_sketch<T: Real>(
    features: &[Vec<T>],
    stack: &ProjectorStack<T>,
    order: usize,
) -> Result<Vec<T>, SketchError> {
    if features.is_empty() {
        return Err(SketchError::EmptyFeatures);
    }
    let mut mean = vec![T::zero(); stack.sketch_dim()];
    for f in features {
        let s = rm_sketch_direct(f, stack, order)?;
        for (m, v) in mean.iter_mut().zip(&s) {
            *m += *v;
        }
    }
    let inv = T::one() / T::cast(features.len() as f64);
    for m in &mut mean {
        *m = *m * inv;
    }
    Ok(mean)
}

/// Independent per-order stacks for the uncascaded trainable variant:
/// order `k` owns its own `k` matrices, so parameters grow as `Σ_k k·c·d`.
#[derive(Debug, Clone)]
pub struct UncascadedStacks<T> {
    per_order: Vec<ProjectorStack<T>>,
}

impl<T: Real> UncascadedStacks<T> {
    pub fn sample_rademacher(
        c: usize,
        d: usize,
        max_order: usize,
        seed: u64,
    ) -> Result<Self, SketchError> {
        if max_order < 2 {
            return Err(SketchError::OrderOutOfRange {
                order: max_order,
                max: 2,
            });
        }
        let per_order = (2..=max_order)
            .map(|k| {
                ProjectorStack::sample_rademacher(
                    c,
                    d,
                    k,
                    crate::scalar::derive_seed(seed, &format!("order{k}")),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { per_order })
    }

    pub fn max_order(&self) -> usize {
        self.per_order.len() + 1
    }

    /// Stack dedicated to order `k` (`2..=max_order`).
    pub fn stack_for_order(&self, k: usize) -> &ProjectorStack<T> {
        &self.per_order[k - 2]
    }

    pub fn stack_for_order_mut(&mut self, k: usize) -> &mut ProjectorStack<T> {
        &mut self.per_order[k - 2]
    }

    pub fn scalar_param_count(&self) -> usize {
        self.per_order
            .iter()
            .map(|s| s.orders() * s.feature_dim() * s.sketch_dim())
            .sum()
    }
}

// ── graph builders ──────────────────────────────────────────────────

/// Register the stack matrices as trainable parameters named
/// `{prefix}.w{k}`; returns their node ids in order.
pub fn stack_param_nodes<T: Real>(
    g: &mut Graph<T>,
    stack: &ProjectorStack<T>,
    prefix: &str,
) -> Result<Vec<NodeId>, GraphError> {
    stack
        .matrices()
        .iter()
        .enumerate()
        .map(|(i, m)| g.param(&format!("{prefix}.w{}", i + 1), m.clone()))
        .collect()
}

/// Bake the stack matrices into the graph as constants (frozen mode).
pub fn stack_const_nodes<T: Real>(g: &mut Graph<T>, stack: &ProjectorStack<T>) -> Vec<NodeId> {
    stack
        .matrices()
        .iter()
        .map(|m| g.constant(m.clone()))
        .collect()
}

/// Cascaded sketch pipeline over `(n, c)` feature rows. `mats` holds the
/// node ids of `W_1..W_K`; returns per-order `(n, d)` nodes for orders
/// `2..=K`, sharing projections across orders.
pub fn cascade_nodes<T: Real>(
    g: &mut Graph<T>,
    features: NodeId,
    mats: &[NodeId],
    sketch_dim: usize,
) -> Result<Vec<NodeId>, GraphError> {
    assert!(mats.len() >= 2, "cascade needs at least W_1 and W_2");
    let z1 = g.matmul(features, mats[0], false, false)?;
    let z2 = g.matmul(features, mats[1], false, false)?;
    let prod = g.hadamard(z1, z2)?;
    let mut current = g.scale(prod, 1.0 / (sketch_dim as f64).sqrt());
    let mut out = vec![current];
    for &mat in &mats[2..] {
        let z = g.matmul(features, mat, false, false)?;
        current = g.hadamard(current, z)?;
        out.push(current);
    }
    Ok(out)
}

/// Independent per-order sketch pipelines (no matrix sharing):
/// `mats_per_order[i]` holds the `i+2` matrices for order `i+2`.
pub fn uncascaded_nodes<T: Real>(
    g: &mut Graph<T>,
    features: NodeId,
    mats_per_order: &[Vec<NodeId>],
    sketch_dim: usize,
) -> Result<Vec<NodeId>, GraphError> {
    let scale = 1.0 / (sketch_dim as f64).sqrt();
    let mut out = Vec::with_capacity(mats_per_order.len());
    for mats in mats_per_order {
        let mut acc = g.matmul(features, mats[0], false, false)?;
        for &mat in &mats[1..] {
            let z = g.matmul(features, mat, false, false)?;
            acc = g.hadamard(acc, z)?;
        }
        out.push(g.scale(acc, scale));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_poly_kernel, kron_moment};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn sampled_stack_has_sign_entries_and_is_reproducible() {
        let a = ProjectorStack::<f64>::sample_rademacher(2, 4, 3, 7).unwrap();
        let b = ProjectorStack::<f64>::sample_rademacher(2, 4, 3, 7).unwrap();
        assert_eq!(a.orders(), 3);
        for k in 1..=3 {
            assert_eq!(a.matrix(k).shape(), &[2, 4]);
            assert!(a.matrix(k).data().iter().all(|&v| v == 1.0 || v == -1.0));
            assert_eq!(a.matrix(k).data(), b.matrix(k).data());
        }
        let c = ProjectorStack::<f64>::sample_rademacher(2, 4, 3, 8).unwrap();
        assert_ne!(a.matrix(1).data(), c.matrix(1).data());
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(
            ProjectorStack::<f64>::sample_rademacher(0, 4, 2, 1),
            Err(SketchError::BadDims { .. })
        ));
    }

    #[test]
    fn entry_mean_obeys_law_of_large_numbers() {
        let stack = ProjectorStack::<f64>::sample_rademacher(1000, 1000, 1, 123).unwrap();
        let mean: f64 =
            stack.matrix(1).data().iter().sum::<f64>() / stack.matrix(1).data().len() as f64;
        assert!(mean.abs() < 0.01, "entry mean {mean}");
    }

    #[test]
    fn scalar_case_matches_hand_arithmetic() {
        let stack = ProjectorStack::from_matrices(
            vec![
                Tensor::from_rows(1, 1, &[1.0]).unwrap(),
                Tensor::from_rows(1, 1, &[-1.0]).unwrap(),
            ],
            0,
        )
        .unwrap();
        let sx = rm_sketch_direct(&[3.0], &stack, 2).unwrap();
        let sy = rm_sketch_direct(&[2.0], &stack, 2).unwrap();
        assert_eq!(sx, vec![-9.0]);
        assert_eq!(sy, vec![-4.0]);
        let est = polykernel_estimate(&sx, &sy).unwrap();
        assert_eq!(est, 36.0); // = (3·2)²
        assert_eq!(est, exact_poly_kernel(&[3.0], &[2.0], 2).unwrap());
    }

    #[test]
    fn zero_vector_sketches_to_zero() {
        let stack = ProjectorStack::<f64>::sample_rademacher(4, 8, 4, 3).unwrap();
        for k in 2..=4 {
            let s = rm_sketch_direct(&[0.0; 4], &stack, k).unwrap();
            assert!(s.iter().all(|&v| v == 0.0));
        }
        let all = cascade_sketches(&[0.0; 4], &stack, 4).unwrap();
        assert!(all.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn order_below_two_rejected() {
        let stack = ProjectorStack::<f64>::sample_rademacher(4, 8, 3, 3).unwrap();
        assert!(matches!(
            rm_sketch_direct(&[1.0; 4], &stack, 1),
            Err(SketchError::OrderOutOfRange { .. })
        ));
        assert!(matches!(
            rm_sketch_direct(&[1.0; 4], &stack, 4),
            Err(SketchError::OrderOutOfRange { .. })
        ));
    }

    #[test]
    fn cascade_equals_direct_componentwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let stack = ProjectorStack::<f64>::sample_rademacher(4, 16, 5, 21).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let cascade = cascade_sketches(&x, &stack, 5).unwrap();
            for (i, k) in (2..=5).enumerate() {
                let direct = rm_sketch_direct(&x, &stack, k).unwrap();
                let scale = direct.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (a, b) in cascade[i].iter().zip(&direct) {
                    assert!((a - b).abs() <= 1e-10 * scale.max(1.0));
                }
            }
        }
    }

    #[test]
    fn fifth_order_is_explicit_product_of_projections() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let stack = ProjectorStack::<f64>::sample_rademacher(4, 16, 5, 77).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
        let phi5 = cascade_sketches(&x, &stack, 5).unwrap().pop().unwrap();
        let scale = 1.0 / (16f64).sqrt();
        for j in 0..16 {
            let mut expected = scale;
            for k in 1..=5 {
                let w = stack.matrix(k).data();
                let proj: f64 = (0..4).map(|i| x[i] * w[i * 16 + j]).sum();
                expected *= proj;
            }
            assert!((phi5[j] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn empirical_mean_edge_cases() {
        let stack = ProjectorStack::<f64>::sample_rademacher(3, 8, 2, 9).unwrap();
        let x = vec![0.4, -0.2, 0.7];
        let single = empirical_moment_sketch(&[x.clone()], &stack, 2).unwrap();
        assert_eq!(single, rm_sketch_direct(&x, &stack, 2).unwrap());
        let doubled = empirical_moment_sketch(&[x.clone(), x.clone()], &stack, 2).unwrap();
        for (a, b) in doubled.iter().zip(&single) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(matches!(
            empirical_moment_sketch::<f64>(&[], &stack, 2),
            Err(SketchError::EmptyFeatures)
        ));
    }

    #[test]
    fn estimator_is_unbiased_for_degree_three() {
        // mean over fresh stacks of ⟨φ₃(x), φ₃(y)⟩ vs ⟨x,y⟩³, judged at 3 SE
        let c = 8;
        let d = 64;
        let trials = 2000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let x: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() - 0.5).collect();
        let exact = exact_poly_kernel(&x, &y, 3).unwrap();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for t in 0..trials {
            let stack = ProjectorStack::<f64>::sample_rademacher(c, d, 3, 1000 + t).unwrap();
            let sx = rm_sketch_direct(&x, &stack, 3).unwrap();
            let sy = rm_sketch_direct(&y, &stack, 3).unwrap();
            let est = polykernel_estimate(&sx, &sy).unwrap();
            sum += est;
            sumsq += est * est;
        }
        let mean = sum / trials as f64;
        let var = (sumsq / trials as f64 - mean * mean).max(0.0);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "bias {} exceeds 3·SE {}",
            (mean - exact).abs(),
            3.0 * se
        );
    }

    #[test]
    fn second_order_mean_sketch_tracks_exact_kron_mean() {
        // inner products of mean sketches vs inner products of exact x^⊗2
        // means, averaged over stacks
        let c = 4;
        let d = 512;
        let stacks = 60;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let set_a: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..c).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let set_b: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..c).map(|_| rng.gen::<f64>() * 0.6).collect())
            .collect();
        let mean_a = mean_of(&set_a, |x| kron_moment(x, 2).unwrap());
        let mean_b = mean_of(&set_b, |x| kron_moment(x, 2).unwrap());
        let exact: f64 = mean_a.iter().zip(&mean_b).map(|(a, b)| a * b).sum();
        let mut acc = 0.0;
        for s in 0..stacks {
            let stack = ProjectorStack::<f64>::sample_rademacher(c, d, 2, 500 + s).unwrap();
            let sa = empirical_moment_sketch(&set_a, &stack, 2).unwrap();
            let sb = empirical_moment_sketch(&set_b, &stack, 2).unwrap();
            acc += polykernel_estimate(&sa, &sb).unwrap();
        }
        let est = acc / stacks as f64;
        let rel = (est - exact).abs() / exact.abs().max(1e-12);
        assert!(rel < 0.05, "relative error {rel}");
    }

    fn mean_of(set: &[Vec<f64>], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        let mut acc = f(&set[0]);
        for s in &set[1..] {
            for (a, b) in acc.iter_mut().zip(f(s)) {
                *a += b;
            }
        }
        for a in &mut acc {
            *a /= set.len() as f64;
        }
        acc
    }

    #[test]
    fn uncascaded_parameter_count_grows_quadratically() {
        let c = 3;
        let d = 5;
        let k = 4;
        let un = UncascadedStacks::<f64>::sample_rademacher(c, d, k, 9).unwrap();
        let expected: usize = (2..=k).map(|o| o * c * d).sum();
        assert_eq!(un.scalar_param_count(), expected);
        // cascade uses exactly K matrices
        let cascade = ProjectorStack::<f64>::sample_rademacher(c, d, k, 9).unwrap();
        let cascade_count: usize = cascade.orders() * c * d;
        assert!(cascade_count < expected);
    }

    #[test]
    fn graph_cascade_matches_value_cascade() {
        let stack = ProjectorStack::<f64>::sample_rademacher(4, 8, 4, 13).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 4]).unwrap();
        let mats = stack_const_nodes(&mut g, &stack);
        let orders = cascade_nodes(&mut g, x, &mats, 8).unwrap();
        for (i, &node) in orders.iter().enumerate() {
            g.mark_output(&format!("phi{}", i + 2), node);
        }
        let rows = [
            vec![0.3, -0.1, 0.8, 0.05],
            vec![-0.6, 0.2, 0.0, 0.9],
        ];
        let input =
            Tensor::from_rows(2, 4, &[rows[0].clone(), rows[1].clone()].concat()).unwrap();
        let mut out = g.forward(&[("x", &input)]).unwrap();
        for k in 2..=4 {
            let got = out.remove(&format!("phi{k}")).unwrap();
            for (r, row) in rows.iter().enumerate() {
                let expected = rm_sketch_direct(row, &stack, k).unwrap();
                for (j, &e) in expected.iter().enumerate() {
                    let v = got.data()[r * 8 + j];
                    assert!((v - e).abs() <= 1e-12 * e.abs().max(1.0));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn homogeneity_in_each_order(
            xs in proptest::collection::vec(-1.0f64..1.0, 4),
            pow in -2i32..3
        ) {
            // α a power of two, so α^k·φ_k(x) is representable exactly
            let alpha = (2.0f64).powi(pow);
            let stack = ProjectorStack::<f64>::sample_rademacher(4, 8, 4, 99).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|&v| alpha * v).collect();
            for k in 2..=4 {
                let base = rm_sketch_direct(&xs, &stack, k).unwrap();
                let lifted = rm_sketch_direct(&scaled, &stack, k).unwrap();
                let factor = alpha.powi(k as i32);
                for (a, b) in lifted.iter().zip(&base) {
                    prop_assert_eq!(*a, factor * b);
                }
            }
        }

        #[test]
        fn cascade_direct_equivalence_property(
            xs in proptest::collection::vec(-2.0f64..2.0, 3),
            seed in 0u64..500
        ) {
            let stack = ProjectorStack::<f64>::sample_rademacher(3, 8, 4, seed).unwrap();
            let cascade = cascade_sketches(&xs, &stack, 4).unwrap();
            for (i, k) in (2..=4).enumerate() {
                let direct = rm_sketch_direct(&xs, &stack, k).unwrap();
                let scale = direct.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (a, b) in cascade[i].iter().zip(&direct) {
                    prop_assert!((a - b).abs() <= 1e-10 * scale.max(1.0));
                }
            }
        }
    }
}

//! Adam optimizer over a graph's parameter registry.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }

    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            eps: Self::default_eps(),
        }
    }
}

/// Bias-corrected Adam; moment buffers are keyed by parameter name so the
/// optimizer survives graph rebuilds with identical registries.
#[derive(Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    first: HashMap<String, Vec<T>>,
    second: HashMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently accumulated in the
    /// graph registry. Does not zero the gradients.
    pub fn step(&mut self, graph: &mut Graph<T>) {
        self.step += 1;
        let lr = T::cast(self.cfg.lr);
        let b1 = T::cast(self.cfg.beta1);
        let b2 = T::cast(self.cfg.beta2);
        let eps = T::cast(self.cfg.eps);
        let one = T::one();
        let bias1 = one - T::cast(self.cfg.beta1.powi(self.step as i32));
        let bias2 = one - T::cast(self.cfg.beta2.powi(self.step as i32));
        let first = &mut self.first;
        let second = &mut self.second;
        graph.update_params(|name, value, grad| {
            let m = first
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); value.len()]);
            let v = second
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); value.len()]);
            for ((p, &g), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Tensor::from_slice(&[10.0])).unwrap();
        let sq = g.square(w);
        let loss = g.sum(sq);
        g.mark_output("loss", loss);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        g.forward(&[]).unwrap();
        g.zero_grads();
        g.backward_scalar("loss").unwrap();
        adam.step(&mut g);
        let w_val = g.param_value("w").unwrap().item();
        // bias-corrected first step ≈ lr·sign(grad)
        assert!((w_val - (10.0 - 0.1)).abs() < 1e-6, "w after step: {w_val}");
    }

    #[test]
    fn quadratic_converges() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Tensor::from_slice(&[3.0, -2.0])).unwrap();
        let sq = g.square(w);
        let loss = g.sum(sq);
        g.mark_output("loss", loss);
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..2000 {
            g.forward(&[]).unwrap();
            g.zero_grads();
            g.backward_scalar("loss").unwrap();
            adam.step(&mut g);
        }
        for &v in g.param_value("w").unwrap().data() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }
}

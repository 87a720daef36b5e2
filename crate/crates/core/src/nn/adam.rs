use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        assert_eq!(grads.grads.len(), store.len(), "adam: gradient count mismatch");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.values_mut().iter_mut().enumerate() {
            let g = grads.grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Bound, Graph};

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.7);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &store);
        let grads = ParamGrads::zeros_like(&store);
        for _ in 0..5 {
            adam.step(&mut store, &grads);
        }
        assert_eq!(store.values()[0].item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // t = 1: m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
        for g in [2.5, -0.3] {
            let mut store = scalar_store(1.0);
            let mut adam = Adam::new(AdamConfig::with_lr(0.01), &store);
            let grads = ParamGrads { grads: vec![Tensor::scalar(g)] };
            adam.step(&mut store, &grads);
            let moved = store.values()[0].item() - 1.0;
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15);
            assert!((moved.abs() - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2), &store);
        for _ in 0..500 {
            let g = Graph::new();
            let bound = Bound::trainable(&g, &store);
            let x = bound.var(crate::nn::ParamId(0));
            let loss = (x * x).sum();
            let grads = bound.grads(&g.backward(loss));
            adam.step(&mut store, &grads);
        }
        assert!(store.values()[0].item().abs() < 1e-2, "x = {}", store.values()[0].item());
    }
}

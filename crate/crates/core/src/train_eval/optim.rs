use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tape::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store
            .values()
            .iter()
            .map(|v| Array2::zeros(v.raw_dim()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = c.learning_rate * bc2.sqrt() / bc1;
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= lr * *m / (v.sqrt() + c.epsilon);
                });
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.insert("w", array![[1.0, -2.0]]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = Gradients {
            tensors: vec![array![[0.5, -3.0]]],
        };
        adam.update(&mut store, &grads);
        let w = store.value(id);
        assert!((w[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[[0, 1]] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("w", array![[3.0]]);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..2000 {
            let w = store.value(id)[[0, 0]];
            let grads = Gradients {
                tensors: vec![array![[2.0 * (w - 0.5)]]],
            };
            adam.update(&mut store, &grads);
        }
        assert!((store.value(id)[[0, 0]] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn clipping() {
        let mut g = Gradients {
            tensors: vec![array![[3.0, 4.0]]],
        };
        assert_eq!(clip_global_norm(&mut g, 5.0), 5.0);
        assert_eq!(g.tensors[0], array![[3.0, 4.0]]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}

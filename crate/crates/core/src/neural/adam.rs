//! Adam with bias-corrected moments.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimizer state. Parameters added to the store after construction get
/// fresh moments and their own step count.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, ..Default::default() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        for (idx, p) in store.params_mut().iter_mut().enumerate() {
            if self.first.len() <= idx {
                self.first.push(vec![0.0; p.tensor.len()]);
                self.second.push(vec![0.0; p.tensor.len()]);
                self.steps.push(0);
            }
            self.steps[idx] += 1;
            let t = self.steps[idx] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let g = grads.get(super::params::ParamId(idx));
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            for k in 0..p.tensor.data.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p.tensor.data[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{Parameters, TrainableMask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected first and second moments, kept only for trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub config: AdamConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(params: &Parameters, mask: &TrainableMask, config: AdamConfig) -> Self {
        let moments = params
            .iter()
            .filter(|(n, _)| mask.is_trainable(n))
            .map(|(n, t)| (n.to_owned(), (vec![0.0; t.len()], vec![0.0; t.len()])))
            .collect();
        Self {
            step: 0,
            config,
            moments,
        }
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// One update; `lr_for(name)` picks the learning rate of each tensor.
    /// Tensors without state are left untouched.
    pub fn apply(&mut self, params: &mut Parameters, grads: &Parameters, lr_for: impl Fn(&str) -> f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, (m, v)) in &mut self.moments {
            let lr = lr_for(name);
            let g = grads.data(name);
            let p = params.data_mut(name);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

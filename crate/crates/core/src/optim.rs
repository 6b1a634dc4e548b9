use std::collections::BTreeMap;

use omla_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// Adaptive moment estimation over named tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every `(name, value)` with its gradient; returns the new values.
    pub fn update(&mut self, values: &[(String, Tensor)], grads: &[Tensor]) -> Result<Vec<Tensor>> {
        if values.len() != grads.len() {
            return Err(CoreError::Contract("one gradient per parameter".into()));
        }
        let mut factor = 1.0;
        if let Some(max) = self.config.clip_norm {
            let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > max {
                factor = max / norm;
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(values.len());
        for ((name, value), g) in values.iter().zip(grads) {
            if value.shape() != g.shape() {
                return Err(CoreError::Contract(format!("gradient shape mismatch for `{name}`")));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Numeric(format!("non-finite gradient for `{name}`")));
            }
            let n = value.numel();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut next = value.to_vec();
            for i in 0..n {
                let gi = g.data()[i] * factor;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                next[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
            out.push(Tensor::from_vec(value.shape(), next)?);
        }
        Ok(out)
    }
}

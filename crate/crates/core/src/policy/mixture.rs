use omla_autodiff::{AutodiffError, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Recorded mixture parameters for `n` predicted steps.
#[derive(Debug, Clone)]
pub struct MixtureTensors {
    /// n × K
    pub logits: Tensor,
    /// n × (K·D), mode-major
    pub means: Tensor,
    /// n × (K·D)
    pub log_scales: Tensor,
    pub modes: usize,
    pub action_dim: usize,
}

/// Plain-valued mixture for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub scales: Vec<Vec<f64>>,
}

fn mode_error(e: AutodiffError, width: usize, per_mode: usize) -> CoreError {
    match e {
        AutodiffError::NonFinite { index, .. } => CoreError::NonFiniteMode { mode: (index % width) / per_mode },
        other => other.into(),
    }
}

impl MixtureTensors {
    pub fn rows(&self) -> usize {
        self.logits.rows()
    }

    /// Summed negative log-likelihood of `actions` (n × D), one row per step.
    pub fn nll(&self, actions: &Tensor) -> Result<Tensor> {
        let (k, d) = (self.modes, self.action_dim);
        if actions.shape() != [self.rows(), d] {
            return Err(CoreError::Contract(format!(
                "expected {} × {d} actions, got {:?}",
                self.rows(),
                actions.shape()
            )));
        }
        if actions.data().iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("non-finite target action".into()));
        }
        let copies: Vec<&Tensor> = std::iter::repeat(actions).take(k).collect();
        let tiled = Tensor::concat_cols(&copies)?;
        let per_dim = (|| {
            let z = tiled.sub(&self.means)?.mul(&self.log_scales.neg()?.exp()?)?;
            z.square()?.scale(-0.5)?.sub(&self.log_scales)
        })()
        .map_err(|e| mode_error(e, k * d, d))?;
        let per_mode = per_dim
            .matmul(&mode_sum_matrix(k, d))
            .and_then(|t| t.add_scalar(-(d as f64) * HALF_LN_2PI))
            .and_then(|t| t.add(&self.logits.log_softmax()?))
            .map_err(|e| mode_error(e, k, 1))?;
        Ok(per_mode.logsumexp()?.sum()?.neg()?)
    }

    pub fn step(&self, row: usize) -> Result<ActionDistribution> {
        let (k, d) = (self.modes, self.action_dim);
        let logits = self.logits.slice_rows(row, 1)?;
        let weights = logits.softmax()?.to_vec();
        let mu = self.means.slice_rows(row, 1)?.to_vec();
        let ls = self.log_scales.slice_rows(row, 1)?.to_vec();
        Ok(ActionDistribution {
            weights,
            means: (0..k).map(|m| mu[m * d..(m + 1) * d].to_vec()).collect(),
            scales: (0..k).map(|m| ls[m * d..(m + 1) * d].iter().map(|v| v.exp()).collect()).collect(),
        })
    }
}

fn mode_sum_matrix(k: usize, d: usize) -> Tensor {
    let mut m = vec![0.0; k * d * k];
    for mode in 0..k {
        for j in 0..d {
            m[(mode * d + j) * k + mode] = 1.0;
        }
    }
    Tensor::from_vec(&[k * d, k], m).expect("finite")
}

impl ActionDistribution {
    /// Mean of the highest-weight mode; ties go to the lower index.
    pub fn mode_mean(&self) -> &[f64] {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        &self.means[best]
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.scales[k])
            .map(|(&m, &s)| Normal::new(m, s).expect("positive scale").sample(rng))
            .collect()
    }

    /// Mixture density evaluated directly, without log-space tricks.
    pub fn density(&self, action: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(w, (mu, sd))| {
                w * action
                    .iter()
                    .zip(mu.iter().zip(sd))
                    .map(|(a, (m, s))| (-0.5 * ((a - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()))
                    .product::<f64>()
            })
            .sum()
    }
}

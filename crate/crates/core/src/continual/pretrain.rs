//! Full-model behavior cloning on a suite's pretraining tasks.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{CoreError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::policy::Policy;
use crate::seeding;
use crate::train::{all_windows, base_step, batch_loss, sample_windows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Steps between validation passes.
    pub eval_every: usize,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { max_steps: 6000, batch_size: 32, adam: AdamConfig::default(), eval_every: 200, patience: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    /// Absent before the first update.
    pub train: Option<f64>,
    /// Present on validation steps.
    pub val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Weights at the best validation loss.
    pub policy: Policy,
    pub trace: Vec<LossPoint>,
    pub best_step: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    /// Batch sampler state when training ended.
    pub rng: ChaCha8Rng,
}

/// Mean loss over every window of `episodes` under the current weights.
pub fn validation_loss(policy: &Policy, episodes: &[Episode]) -> Result<f64> {
    let samples = all_windows(episodes);
    let v = batch_loss(policy, &policy.bind(), episodes, &samples)?.item()?;
    if !v.is_finite() {
        return Err(CoreError::Numeric("non-finite validation loss".into()));
    }
    Ok(v)
}

/// Trains every weight of `policy` on `train` until `patience` validation
/// passes in a row fail to improve on the best, or `max_steps` is reached.
pub fn pretrain(mut policy: Policy, train: &[Episode], val: &[Episode], config: &PretrainConfig) -> Result<PretrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Contract("pretraining needs training and validation episodes".into()));
    }
    if config.eval_every == 0 || config.batch_size == 0 {
        return Err(CoreError::Config("eval_every and batch_size must be positive".into()));
    }
    policy.params.unfreeze_all();
    let mut adam = Adam::new(config.adam);
    let mut rng = seeding::rng(config.seed, "pretrain");
    let mut best = policy.clone();
    let mut best_val = validation_loss(&policy, val)?;
    let mut best_step = 0;
    let mut trace = vec![LossPoint { step: 0, train: None, val: Some(best_val) }];
    let mut stale = 0;
    let mut stopped_early = false;
    for step in 1..=config.max_steps {
        let samples = sample_windows(train, config.batch_size, &mut rng);
        let loss = base_step(&mut policy, &mut adam, train, &samples)?;
        let mut point = LossPoint { step, train: Some(loss), val: None };
        if step % config.eval_every == 0 {
            let v = validation_loss(&policy, val)?;
            point.val = Some(v);
            if v < best_val {
                best_val = v;
                best_step = step;
                best = policy.clone();
                stale = 0;
            } else {
                stale += 1;
            }
        }
        trace.push(point);
        if stale >= config.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(PretrainOutcome { policy: best, trace, best_step, best_val, stopped_early, rng })
}

//! Behavior-cloning updates for the full base policy and for adapters.

use omla_autodiff::{grad, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::adapters::AdapterSet;
use crate::data::Episode;
use crate::error::{CoreError, Result};
use crate::optim::Adam;
use crate::policy::{Bound, EncodedEpisode, Policy};

/// A training window: episode index and the step the window ends at.
pub type Sample = (usize, usize);

pub fn all_windows(episodes: &[Episode]) -> Vec<Sample> {
    episodes
        .iter()
        .enumerate()
        .flat_map(|(i, e)| (0..e.len()).map(move |t| (i, t)))
        .collect()
}

/// Draws `n` windows uniformly with replacement.
pub fn sample_windows<R: Rng>(episodes: &[Episode], n: usize, rng: &mut R) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let i = rng.gen_range(0..episodes.len());
            (i, rng.gen_range(0..episodes[i].len()))
        })
        .collect()
}

pub fn shuffled<R: Rng>(mut s: Vec<Sample>, rng: &mut R) -> Vec<Sample> {
    s.shuffle(rng);
    s
}

/// Mean window loss over `samples`, reading raw episodes.
pub fn batch_loss(policy: &Policy, b: &Bound, episodes: &[Episode], samples: &[Sample]) -> Result<Tensor> {
    mean_of(samples.iter().map(|&(i, t)| policy.window_loss(b, &episodes[i], t)))
}

/// Mean window loss over `samples`, reading pre-encoded episodes.
pub fn batch_loss_encoded(policy: &Policy, b: &Bound, encoded: &[EncodedEpisode], samples: &[Sample]) -> Result<Tensor> {
    mean_of(samples.iter().map(|&(i, t)| policy.window_loss_encoded(b, &encoded[i], t)))
}

fn mean_of(losses: impl Iterator<Item = Result<Tensor>>) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    let mut n = 0usize;
    for l in losses {
        let l = l?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
        n += 1;
    }
    let total = total.ok_or_else(|| CoreError::Contract("empty batch".into()))?;
    Ok(total.scale(1.0 / n as f64)?)
}

fn check_finite(loss: &Tensor) -> Result<f64> {
    let v = loss.item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Numeric("non-finite training loss".into()))
    }
}

/// One optimizer step on every unfrozen base weight.
pub fn base_step(policy: &mut Policy, adam: &mut Adam, episodes: &[Episode], samples: &[Sample]) -> Result<f64> {
    let tape = Tape::new();
    let (bound, leaves) = policy.bind_trainable(&tape);
    if leaves.is_empty() {
        return Err(CoreError::Contract("no trainable base weights".into()));
    }
    let loss = batch_loss(policy, &bound, episodes, samples)?;
    let value = check_finite(&loss)?;
    let refs: Vec<&Tensor> = leaves.iter().map(|(_, t)| t).collect();
    let grads = grad(&loss, &refs)?;
    let current: Vec<(String, Tensor)> = leaves.iter().map(|(n, t)| (n.clone(), t.detach())).collect();
    let next = adam.update(&current, &grads)?;
    for ((name, _), v) in current.iter().zip(next) {
        policy.params.set(name, v)?;
    }
    Ok(value)
}

/// Where window losses read their step tokens from.
#[derive(Debug, Clone, Copy)]
pub enum Windows<'a> {
    Raw(&'a [Episode]),
    /// Only valid while nothing upstream of the temporal blocks is trainable.
    Encoded(&'a [EncodedEpisode]),
}

impl<'a> Windows<'a> {
    /// Pre-encoded steps when every adapter target sits after the encoders.
    pub fn for_adapters(set: &AdapterSet, raw: &'a [Episode], encoded: &'a [EncodedEpisode]) -> Self {
        if set.pairs.keys().all(|t| t.starts_with("temporal.") || t.starts_with("head.")) {
            Windows::Encoded(encoded)
        } else {
            Windows::Raw(raw)
        }
    }

    pub fn loss(&self, policy: &Policy, b: &Bound, samples: &[Sample]) -> Result<Tensor> {
        match self {
            Windows::Raw(e) => batch_loss(policy, b, e, samples),
            Windows::Encoded(e) => batch_loss_encoded(policy, b, e, samples),
        }
    }

    pub fn episode_len(&self, i: usize) -> usize {
        match self {
            Windows::Raw(e) => e[i].len(),
            Windows::Encoded(e) => e[i].actions.rows(),
        }
    }
}

/// Gradient of the mean loss with respect to every adapter tensor,
/// in `AdapterSet::tensor_names` order.
pub fn adapter_gradients(
    policy: &Policy,
    set: &AdapterSet,
    windows: Windows<'_>,
    samples: &[Sample],
) -> Result<(f64, Vec<(String, Tensor)>, Vec<Tensor>)> {
    let tape = Tape::new();
    let (lora, leaves) = set.leaves(&tape);
    let bound = policy.bind_with_lora(lora);
    let loss = windows.loss(policy, &bound, samples)?;
    let value = check_finite(&loss)?;
    let refs: Vec<&Tensor> = leaves.iter().map(|(_, t)| t).collect();
    let grads = grad(&loss, &refs)?;
    let current = leaves.into_iter().map(|(n, t)| (n, t.detach())).collect();
    Ok((value, current, grads))
}

/// One optimizer step on the adapter set only; the base is read as constants.
pub fn adapter_step(
    policy: &Policy,
    set: &mut AdapterSet,
    adam: &mut Adam,
    windows: Windows<'_>,
    samples: &[Sample],
) -> Result<f64> {
    let (value, current, grads) = adapter_gradients(policy, set, windows, samples)?;
    let next = adam.update(&current, &grads)?;
    for ((name, _), v) in current.iter().zip(next) {
        set.set_tensor(name, v)?;
    }
    Ok(value)
}

pub fn encode_all(policy: &Policy, episodes: &[Episode]) -> Result<Vec<EncodedEpisode>> {
    episodes.iter().map(|e| policy.encode_episode(e)).collect()
}

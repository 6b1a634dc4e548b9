//! Meta-train/meta-validation pairs built around a nearest-feature anchor.
//!
//! A query step is drawn from one episode of a task; the step of another
//! episode whose cached observation feature is closest to it becomes the
//! anchor, and up to `support` steps within `radius` of the anchor form the
//! meta-train batch.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use omla_autodiff::Tensor;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{CoreError, Result};
use crate::policy::{EncodedEpisode, Policy};
use crate::taskworld::TaskId;
use crate::train::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Meta-train points per batch (b).
    pub support: usize,
    /// Half-width of the window around the anchor (s).
    pub radius: usize,
    /// Meta-validation points per batch.
    pub queries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { support: 5, radius: 5, queries: 1 }
    }
}

/// One task's demonstrations, with step tokens encoded by the frozen base.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: TaskId,
    pub episodes: Vec<Episode>,
    pub encoded: Vec<EncodedEpisode>,
}

impl TaskData {
    pub fn new(policy: &Policy, task: TaskId, episodes: Vec<Episode>) -> Result<Self> {
        for e in &episodes {
            e.validate()?;
            if e.task != task {
                return Err(CoreError::Contract(format!("episode of {} filed under {task}", e.task)));
            }
        }
        let encoded = crate::train::encode_all(policy, &episodes)?;
        Ok(Self { task, episodes, encoded })
    }
}

/// Frozen observation features for every step of every pooled episode.
#[derive(Debug)]
pub struct FeatureCache {
    fingerprint: String,
    entries: BTreeMap<(TaskId, usize), Tensor>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Clone for FeatureCache {
    fn clone(&self) -> Self {
        Self {
            fingerprint: self.fingerprint.clone(),
            entries: self.entries.clone(),
            hits: AtomicUsize::new(self.hits()),
            misses: AtomicUsize::new(self.misses()),
        }
    }
}

impl FeatureCache {
    pub fn new(policy: &Policy) -> Self {
        Self {
            fingerprint: policy.encoder_fingerprint(),
            entries: BTreeMap::new(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn build(policy: &Policy, tasks: &[&TaskData]) -> Result<Self> {
        let mut cache = Self::new(policy);
        for t in tasks {
            cache.insert_task(policy, t)?;
        }
        Ok(cache)
    }

    /// Adds every episode of `data`; the encoder must be the one the cache was built with.
    pub fn insert_task(&mut self, policy: &Policy, data: &TaskData) -> Result<()> {
        self.check(policy)?;
        for (i, ep) in data.episodes.iter().enumerate() {
            self.entries.insert((data.task, i), policy.observation_features(ep)?);
        }
        Ok(())
    }

    pub fn check(&self, policy: &Policy) -> Result<()> {
        let current = policy.encoder_fingerprint();
        if current != self.fingerprint {
            return Err(CoreError::StaleCache { cached: self.fingerprint.clone(), current });
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Per-step feature rows of one episode. Missing entries are counted and
    /// reported, never computed on the fly.
    pub fn episode(&self, task: TaskId, episode: usize) -> Result<&Tensor> {
        match self.entries.get(&(task, episode)) {
            Some(t) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Ok(t)
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                Err(CoreError::Contract(format!("no cached features for {task} episode {episode}")))
            }
        }
    }

    /// Number of cached step features.
    pub fn len(&self) -> usize {
        self.entries.values().map(Tensor::rows).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn episodes(&self) -> impl Iterator<Item = (&(TaskId, usize), &Tensor)> {
        self.entries.iter()
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

/// Index of the row of `features` nearest to `query` in L2; ties go to the
/// smallest index.
pub fn find_anchor(query: &[f64], features: &Tensor) -> Result<usize> {
    let (n, d) = (features.rows(), features.cols());
    if n == 0 || d != query.len() {
        return Err(CoreError::Contract(format!(
            "query of width {} against {n} × {d} features",
            query.len()
        )));
    }
    let data = features.data();
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for i in 0..n {
        let row = &data[i * d..(i + 1) * d];
        let dist = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    Ok(best)
}

/// A sampled meta-train/meta-validation pair. Indices are zero-based steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaBatch {
    pub task: TaskId,
    pub train_episode: usize,
    pub val_episode: usize,
    pub anchor: usize,
    pub query: usize,
    pub train_steps: Vec<usize>,
    pub val_steps: Vec<usize>,
}

impl MetaBatch {
    pub fn train_samples(&self) -> Vec<Sample> {
        self.train_steps.iter().map(|&t| (self.train_episode, t)).collect()
    }

    pub fn val_samples(&self) -> Vec<Sample> {
        self.val_steps.iter().map(|&t| (self.val_episode, t)).collect()
    }
}

/// Clamped window `[m − s, m + s] ∩ [lo, hi)`.
pub fn support_window(anchor: usize, radius: usize, lo: usize, hi: usize) -> (usize, usize) {
    (anchor.saturating_sub(radius).max(lo), (anchor + radius).min(hi - 1))
}

fn pick_support<R: Rng>(first: usize, last: usize, b: usize, rng: &mut R) -> Vec<usize> {
    let len = last - first + 1;
    if len <= b {
        return (first..=last).collect();
    }
    let mut picked: Vec<usize> = index::sample(rng, len, b).into_iter().map(|i| first + i).collect();
    picked.sort_unstable();
    picked
}

fn build<R: Rng>(
    data: &TaskData,
    cache: &FeatureCache,
    cfg: &SamplerConfig,
    rng: &mut R,
    (train_ep, train_lo, train_hi): (usize, usize, usize),
    (val_ep, val_lo, val_hi): (usize, usize, usize),
) -> Result<MetaBatch> {
    let val_steps: Vec<usize> = (0..cfg.queries.max(1)).map(|_| rng.gen_range(val_lo..val_hi)).collect();
    let query = val_steps[0];
    let val_feats = cache.episode(data.task, val_ep)?;
    let train_feats = cache.episode(data.task, train_ep)?;
    let q = val_feats.slice_rows(query, 1)?;
    let candidates = train_feats.slice_rows(train_lo, train_hi - train_lo)?;
    let anchor = train_lo + find_anchor(q.data(), &candidates)?;
    let (first, last) = support_window(anchor, cfg.radius, train_lo, train_hi);
    Ok(MetaBatch {
        task: data.task,
        train_episode: train_ep,
        val_episode: val_ep,
        anchor,
        query,
        train_steps: pick_support(first, last, cfg.support, rng),
        val_steps,
    })
}

/// Draws two distinct episodes of the task, a query in one and the anchored
/// support window in the other.
pub fn sample_meta_batch<R: Rng>(data: &TaskData, cache: &FeatureCache, cfg: &SamplerConfig, rng: &mut R) -> Result<MetaBatch> {
    let n = data.episodes.len();
    if n < 2 {
        return Err(CoreError::Pairing(format!("{} has {n} episode(s), need two", data.task)));
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let ti = data.episodes[i].len();
    let tj = data.episodes[j].len();
    build(data, cache, cfg, rng, (i, 0, ti), (j, 0, tj))
}

/// As `sample_meta_batch`, but a task with one episode is split at its
/// midpoint into a train half and a validation half.
pub fn sample_or_split<R: Rng>(data: &TaskData, cache: &FeatureCache, cfg: &SamplerConfig, rng: &mut R) -> Result<MetaBatch> {
    match data.episodes.len() {
        1 => {
            let t = data.episodes[0].len();
            let mid = t / 2;
            build(data, cache, cfg, rng, (0, 0, mid), (0, mid, t))
        }
        _ => sample_meta_batch(data, cache, cfg, rng),
    }
}

//! Online meta-learning of an adapter prior: an inner gradient step on the
//! meta-train batch, then the meta-validation loss differentiated through
//! that step.

use omla_autodiff::{backward, grad, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::error::{CoreError, Result};
use crate::metabatch::{sample_or_split, FeatureCache, MetaBatch, SamplerConfig, TaskData};
use crate::optim::{Adam, AdamConfig};
use crate::policy::Policy;
use crate::seeding;
use crate::train::Windows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Pretraining data plus every adaptation task finished so far.
    #[default]
    AllSeen,
    /// Pretraining data only.
    PretrainOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub meta_steps: usize,
    pub pool_mode: PoolMode,
    /// Tasks drawn per outer step; gradients are averaged.
    pub tasks_per_step: usize,
    pub clip_norm: Option<f64>,
    pub sampler: SamplerConfig,
    /// Let the meta phase for a task also sample that task's own demonstrations.
    pub include_current_task: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            outer_lr: 1e-3,
            inner_steps: 1,
            first_order: false,
            meta_steps: 100,
            pool_mode: PoolMode::AllSeen,
            tasks_per_step: 1,
            clip_norm: None,
            sampler: SamplerConfig::default(),
            include_current_task: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) || !self.inner_lr.is_finite() {
            return Err(CoreError::Config("inner_lr must be positive".into()));
        }
        if !(self.outer_lr > 0.0) {
            return Err(CoreError::Config("outer_lr must be positive".into()));
        }
        if self.inner_steps == 0 {
            return Err(CoreError::Config("inner_steps must be at least 1".into()));
        }
        if self.tasks_per_step == 0 {
            return Err(CoreError::Config("tasks_per_step must be at least 1".into()));
        }
        if self.sampler.support == 0 {
            return Err(CoreError::Config("sampler.support must be at least 1".into()));
        }
        Ok(())
    }
}

/// `φ − α∇L(φ)`, repeated `steps` times. `phi` must already be on a tape.
/// With `create_graph` the result stays differentiable in `phi` through the
/// gradient itself; otherwise the gradient enters as a constant.
pub fn inner_update<F>(phi: &[Tensor], alpha: f64, steps: usize, create_graph: bool, train_loss: F) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut cur = phi.to_vec();
    for _ in 0..steps {
        let loss = train_loss(&cur)?;
        let refs: Vec<&Tensor> = cur.iter().collect();
        let grads = backward(&loss, &refs, create_graph).map_err(|e| match e {
            omla_autodiff::AutodiffError::NonFinite { op, .. } => {
                CoreError::Numeric(format!("non-finite inner gradient in {op}"))
            }
            other => other.into(),
        })?;
        cur = cur
            .iter()
            .zip(&grads)
            .map(|(p, g)| Ok(p.sub(&g.scale(alpha)?)?))
            .collect::<Result<_>>()?;
    }
    Ok(cur)
}

/// Outer gradient of `val_loss(U(φ))` with respect to `φ`, and the outer
/// loss value. `first_order` drops the dependence of the inner gradient on φ.
pub fn meta_gradient<FT, FV>(
    phi: &[Tensor],
    alpha: f64,
    inner_steps: usize,
    first_order: bool,
    train_loss: FT,
    val_loss: FV,
) -> Result<(f64, Vec<Tensor>)>
where
    FT: Fn(&[Tensor]) -> Result<Tensor>,
    FV: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = phi.iter().map(|p| tape.leaf(&p.detach())).collect();
    let adapted = inner_update(&leaves, alpha, inner_steps, !first_order, train_loss)?;
    let loss = val_loss(&adapted)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(CoreError::Numeric("non-finite meta-validation loss".into()));
    }
    let refs: Vec<&Tensor> = leaves.iter().collect();
    Ok((value, grad(&loss, &refs)?))
}

/// The pool of seen task datasets the meta phase samples from, uniformly.
#[derive(Debug, Clone, Default)]
pub struct MetaPool<'a> {
    pub tasks: Vec<&'a TaskData>,
}

impl<'a> MetaPool<'a> {
    pub fn new(tasks: Vec<&'a TaskData>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(CoreError::Contract("meta pool is empty".into()));
        }
        Ok(Self { tasks })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> &'a TaskData {
        self.tasks[rng.gen_range(0..self.tasks.len())]
    }

    pub fn episode_count(&self) -> usize {
        self.tasks.iter().map(|t| t.episodes.len()).sum()
    }
}

/// Meta gradient of one sampled batch for adapter set `set`.
pub fn batch_meta_gradient(
    policy: &Policy,
    set: &AdapterSet,
    data: &TaskData,
    batch: &MetaBatch,
    config: &MetaConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let windows = Windows::for_adapters(set, &data.episodes, &data.encoded);
    let train = batch.train_samples();
    let val = batch.val_samples();
    let phi: Vec<Tensor> = set.tensors().into_iter().map(|(_, t)| t).collect();
    meta_gradient(
        &phi,
        config.inner_lr,
        config.inner_steps,
        config.first_order,
        |xs| windows.loss(policy, &policy.bind_with_lora(set.bound_from(xs)), &train),
        |xs| windows.loss(policy, &policy.bind_with_lora(set.bound_from(xs)), &val),
    )
}

/// One outer update of `set`: sample tasks, build their meta-batches,
/// average the meta gradients and take an Adam step.
pub fn meta_step<R: Rng>(
    policy: &Policy,
    set: &mut AdapterSet,
    pool: &MetaPool<'_>,
    cache: &FeatureCache,
    config: &MetaConfig,
    adam: &mut Adam,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for _ in 0..config.tasks_per_step {
        let data = pool.sample(rng);
        let batch = sample_or_split(data, cache, &config.sampler, rng)?;
        let (loss, grads) = batch_meta_gradient(policy, set, data, &batch, config)?;
        total += loss;
        sum = Some(match sum {
            None => grads,
            Some(acc) => acc.iter().zip(&grads).map(|(a, g)| a.add(g)).collect::<std::result::Result<_, _>>()?,
        });
    }
    let n = config.tasks_per_step as f64;
    let grads: Vec<Tensor> = sum
        .expect("at least one task per step")
        .iter()
        .map(|g| g.scale(1.0 / n))
        .collect::<std::result::Result<_, _>>()?;
    let current = set.tensors();
    let next = adam.update(&current, &grads)?;
    for ((name, _), v) in current.iter().zip(next) {
        set.set_tensor(name, v)?;
    }
    Ok(total / n)
}

/// `meta_steps` outer updates from `init`; returns the learned prior and
/// the outer-loss trace.
pub fn run_meta_phase(
    policy: &Policy,
    init: &AdapterSet,
    pool: &MetaPool<'_>,
    cache: &FeatureCache,
    config: &MetaConfig,
    seed: u64,
) -> Result<(AdapterSet, Vec<f64>)> {
    config.validate()?;
    cache.check(policy)?;
    let mut set = init.clone();
    let mut adam = Adam::new(AdamConfig { lr: config.outer_lr, clip_norm: config.clip_norm, ..AdamConfig::default() });
    let mut rng = seeding::rng(seed, "meta-phase");
    let mut trace = Vec::with_capacity(config.meta_steps);
    for _ in 0..config.meta_steps {
        trace.push(meta_step(policy, &mut set, pool, cache, config, &mut adam, &mut rng)?);
    }
    Ok((set, trace))
}

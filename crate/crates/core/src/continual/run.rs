//! The continual adaptation loop over a family's task sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Method, RunConfig, Scenario};
use super::eval::{evaluate, EvalOptions};
use super::metrics::{compute_bwt, compute_fwt};
use crate::adapters::{default_targets, init_adapters, AdapterRegistry, AdapterSet};
use crate::data::Episode;
use crate::error::{CoreError, Result};
use crate::metabatch::{FeatureCache, TaskData};
use crate::metalearn::{run_meta_phase, MetaPool, PoolMode};
use crate::optim::Adam;
use crate::policy::Policy;
use crate::seeding;
use crate::taskworld::{Family, TaskId, TaskSpec};
use crate::train::{adapter_step, base_step, sample_windows, Sample, Windows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: TaskId,
    pub snapshot_steps: Vec<usize>,
    pub snapshots: Vec<f64>,
    pub fwt: f64,
    /// Index into `snapshots` of the retained model.
    pub best_snapshot: usize,
    /// Success on each earlier task after this one was adapted.
    pub success: Vec<f64>,
    pub bwt: Option<f64>,
    pub meta_steps: usize,
    pub meta_loss_first: Option<f64>,
    pub meta_loss_last: Option<f64>,
    pub pool: Vec<TaskId>,
    /// |D| once this task's demonstrations joined the seen data.
    pub dataset_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub scenario: Scenario,
    pub family: Family,
    pub demos: usize,
    pub seed: u64,
    pub config_hash: String,
    pub tasks: Vec<TaskRecord>,
    pub mean_fwt: f64,
    /// Mean over tasks two onwards; absent for a one-task sequence.
    pub mean_bwt: Option<f64>,
    pub base_hash_before: String,
    pub base_hash_after: String,
}

impl RunRecord {
    pub fn fwt(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.fwt).collect()
    }

    /// Lower-triangular success matrix, row k holding tasks `0..k`.
    pub fn success_matrix(&self) -> Vec<Vec<f64>> {
        self.tasks.iter().map(|t| t.success.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    /// The retained adapters of every task; empty for er.
    pub adapters: AdapterRegistry,
    /// The base after the run, modified only by er.
    pub policy: Policy,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn with_adapter(base: &Policy, set: &AdapterSet) -> Result<Policy> {
    let mut p = base.clone();
    p.attach(set)?;
    Ok(p)
}

/// Fine-tunes `set` on one task, evaluating at each snapshot step; returns
/// the snapshot successes and the adapters of the best one.
fn finetune_adapters(
    base: &Policy,
    mut set: AdapterSet,
    spec: &TaskSpec,
    data: &TaskData,
    config: &RunConfig,
    opts: EvalOptions,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, AdapterSet)> {
    let steps = config.snapshot_steps();
    let windows = Windows::for_adapters(&set, &data.episodes, &data.encoded);
    let mut adam = Adam::new(config.finetune);
    let mut snaps = Vec::with_capacity(steps.len());
    let mut best: Option<AdapterSet> = None;
    let mut snapshot = |set: &AdapterSet, snaps: &mut Vec<f64>| -> Result<()> {
        let s = evaluate(&with_adapter(base, set)?, spec, opts)?;
        if snaps.iter().all(|&v| s > v) {
            best = Some(set.clone());
        }
        snaps.push(s);
        Ok(())
    };
    let mut next = 0;
    if steps[0] == 0 {
        snapshot(&set, &mut snaps)?;
        next = 1;
    }
    for step in 1..=config.finetune_steps {
        let samples = sample_windows(&data.episodes, config.batch_size, rng);
        adapter_step(base, &mut set, &mut adam, windows, &samples)?;
        if next < steps.len() && steps[next] == step {
            snapshot(&set, &mut snaps)?;
            next += 1;
        }
    }
    Ok((snaps, best.expect("at least one snapshot")))
}

/// Full-model fine-tuning where every batch is half new-task windows and
/// half windows from all previously seen episodes.
fn finetune_replay(
    start: &Policy,
    spec: &TaskSpec,
    data: &TaskData,
    buffer: &[Episode],
    config: &RunConfig,
    opts: EvalOptions,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Policy)> {
    let steps = config.snapshot_steps();
    let mut policy = start.clone();
    let mut combined = data.episodes.clone();
    combined.extend_from_slice(buffer);
    let offset = data.episodes.len();
    let (n_new, n_old) = if buffer.is_empty() {
        (config.batch_size, 0)
    } else {
        (config.batch_size / 2, config.batch_size - config.batch_size / 2)
    };
    let mut adam = Adam::new(config.finetune);
    let mut snaps = Vec::with_capacity(steps.len());
    let mut best: Option<Policy> = None;
    let snapshot = |p: &Policy, snaps: &mut Vec<f64>, best: &mut Option<Policy>| -> Result<()> {
        let s = evaluate(p, spec, opts)?;
        if snaps.iter().all(|&v| s > v) {
            *best = Some(p.clone());
        }
        snaps.push(s);
        Ok(())
    };
    let mut next = 0;
    if steps[0] == 0 {
        snapshot(&policy, &mut snaps, &mut best)?;
        next = 1;
    }
    for step in 1..=config.finetune_steps {
        let mut samples: Vec<Sample> = sample_windows(&data.episodes, n_new, rng);
        if n_old > 0 {
            samples.extend(sample_windows(buffer, n_old, rng).into_iter().map(|(i, t)| (i + offset, t)));
        }
        base_step(&mut policy, &mut adam, &combined, &samples)?;
        if next < steps.len() && steps[next] == step {
            snapshot(&policy, &mut snaps, &mut best)?;
            next += 1;
        }
    }
    Ok((snaps, best.expect("at least one snapshot")))
}

/// Adapts `pretrained` to each task of `sequence` in order. `seen` holds the
/// pretraining datasets, one entry per task; each sequence entry pairs a
/// task with at least `config.demos` demonstrations, of which the first
/// `config.demos` are used.
pub fn run_sequence(
    pretrained: &Policy,
    seen: &[Vec<Episode>],
    sequence: &[(TaskSpec, Vec<Episode>)],
    config: &RunConfig,
) -> Result<RunOutcome> {
    config.validate()?;
    if sequence.is_empty() {
        return Err(CoreError::Contract("empty task sequence".into()));
    }
    if config.method == Method::Omla && seen.is_empty() {
        return Err(CoreError::Contract("the meta phase needs pretraining datasets".into()));
    }
    let mut base = pretrained.clone();
    base.detach();
    base.params.freeze_all();
    let hash_before = base.params.full_hash();
    let opts = EvalOptions {
        rollouts: config.eval_rollouts,
        stochastic: config.stochastic_eval.then(|| seeding::mix(config.seed, seeding::tag("eval"))),
    };
    let targets = if config.targets.is_empty() { default_targets(&base.config) } else { config.targets.clone() };
    let pool_mode = match config.scenario {
        Scenario::PretrainPoolOnly => PoolMode::PretrainOnly,
        _ => config.meta.pool_mode,
    };

    let pretrain_data = seen
        .iter()
        .map(|eps| {
            let task = eps.first().ok_or_else(|| CoreError::Contract("empty pretraining dataset".into()))?.task;
            TaskData::new(&base, task, eps.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cache = if config.method == Method::Omla {
        Some(FeatureCache::build(&base, &pretrain_data.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    let mut adapted: Vec<TaskData> = Vec::new();
    let mut registry = AdapterRegistry::new();
    let mut er_policy = (config.method == Method::Er).then(|| {
        let mut p = base.clone();
        p.params.unfreeze_all();
        p
    });
    let pretrain_episodes: usize = seen.iter().map(Vec::len).sum();
    let mut records: Vec<TaskRecord> = Vec::new();

    for (k, (spec, episodes)) in sequence.iter().enumerate() {
        if episodes.len() < config.demos {
            return Err(CoreError::Contract(format!(
                "{} has {} demonstrations, the run needs {}",
                spec.id,
                episodes.len(),
                config.demos
            )));
        }
        let data = TaskData::new(&base, spec.id, episodes[..config.demos].to_vec())?;
        let mut rng = seeding::rng(seeding::mix(config.seed, k as u64), "finetune");
        let mut pool_ids = Vec::new();
        let mut trace = Vec::new();

        let (snaps, success) = match config.method {
            Method::Omla | Method::Lora => {
                let init_seed = seeding::mix(config.seed, k as u64);
                let mut prior = init_adapters(&base.params, &targets, config.rank, config.lora_scaling, spec.id, init_seed)?;
                if config.method == Method::Omla {
                    let cache = cache.as_mut().expect("omla builds a cache");
                    let mut pool: Vec<&TaskData> = pretrain_data.iter().collect();
                    if pool_mode == PoolMode::AllSeen {
                        pool.extend(adapted.iter());
                    }
                    if config.meta.include_current_task {
                        cache.insert_task(&base, &data)?;
                        pool.push(&data);
                    }
                    pool_ids = pool.iter().map(|t| t.task).collect();
                    let (learned, t) =
                        run_meta_phase(&base, &prior, &MetaPool::new(pool)?, cache, &config.meta, init_seed)?;
                    prior = learned;
                    trace = t;
                }
                let (snaps, best) = finetune_adapters(&base, prior, spec, &data, config, opts, &mut rng)?;
                registry.insert(best);
                let fwt_so_far: Vec<f64> = records.iter().map(|r| r.fwt).collect();
                let mut success = Vec::with_capacity(k);
                for (i, (earlier, _)) in sequence[..k].iter().enumerate() {
                    let set = registry.get(earlier.id).expect("earlier task adapted");
                    let s = evaluate(&with_adapter(&base, set)?, earlier, opts)?;
                    if s != fwt_so_far[i] {
                        return Err(CoreError::Invariant(format!(
                            "{} changed from {} to {s} under its own adapters",
                            earlier.id, fwt_so_far[i]
                        )));
                    }
                    success.push(s);
                }
                (snaps, success)
            }
            Method::Er => {
                let mut buffer: Vec<Episode> = seen.iter().flatten().cloned().collect();
                buffer.extend(adapted.iter().flat_map(|t| t.episodes.iter().cloned()));
                let current = er_policy.as_ref().expect("er keeps a policy");
                let (snaps, best) = finetune_replay(current, spec, &data, &buffer, config, opts, &mut rng)?;
                let success = sequence[..k]
                    .iter()
                    .map(|(earlier, _)| evaluate(&best, earlier, opts))
                    .collect::<Result<Vec<_>>>()?;
                er_policy = Some(best);
                (snaps, success)
            }
        };

        let (fwt, best_snapshot) = compute_fwt(&snaps)?;
        let fwt_so_far: Vec<f64> = records.iter().map(|r| r.fwt).collect();
        let bwt = if k == 0 { None } else { Some(compute_bwt(&success, &fwt_so_far)?) };
        if config.method.uses_adapters() && bwt.is_some_and(|b| b != 0.0) {
            return Err(CoreError::Invariant(format!("adapter run forgot: BWT {bwt:?} after {}", spec.id)));
        }
        if config.method == Method::Omla {
            cache.as_mut().expect("omla builds a cache").insert_task(&base, &data)?;
        }
        adapted.push(data);
        let dataset_episodes = pretrain_episodes + adapted.iter().map(|t| t.episodes.len()).sum::<usize>();
        if dataset_episodes != pretrain_episodes + (k + 1) * config.demos {
            return Err(CoreError::Invariant("seen dataset size drifted".into()));
        }
        records.push(TaskRecord {
            task: spec.id,
            snapshot_steps: config.snapshot_steps(),
            snapshots: snaps,
            fwt,
            best_snapshot,
            success,
            bwt,
            meta_steps: config.meta_steps(),
            meta_loss_first: trace.first().copied(),
            meta_loss_last: trace.last().copied(),
            pool: pool_ids,
            dataset_episodes,
        });
    }

    let policy = match er_policy {
        Some(mut p) => {
            p.params.freeze_all();
            p
        }
        None => base,
    };
    let base_hash_after = policy.params.full_hash();
    if config.method.uses_adapters() && base_hash_after != hash_before {
        return Err(CoreError::Invariant("base weights changed during an adapter run".into()));
    }
    let fwt: Vec<f64> = records.iter().map(|r| r.fwt).collect();
    let bwts: Vec<f64> = records.iter().filter_map(|r| r.bwt).collect();
    let record = RunRecord {
        method: config.method,
        scenario: config.scenario,
        family: config.family,
        demos: config.demos,
        seed: config.seed,
        config_hash: config.hash(),
        mean_fwt: mean(&fwt),
        mean_bwt: (!bwts.is_empty()).then(|| mean(&bwts)),
        tasks: records,
        base_hash_before: hash_before,
        base_hash_after,
    };
    Ok(RunOutcome { record, adapters: registry, policy })
}

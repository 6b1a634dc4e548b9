//! Data assembly and training steps shared by the commands.

use omla_core::continual::{pretrain, run_sequence, PretrainOutcome, RunConfig, RunOutcome};
use omla_core::data::{collect_demos, Episode};
use omla_core::policy::Policy;
use omla_core::taskworld::{Family, TaskSpec, TaskSuite, Vocabulary};

use crate::config::LabConfig;
use crate::episodes::EpisodeFile;
use crate::error::Result;

/// The pretraining datasets of a family, one entry per task, plus the
/// pooled validation episodes.
#[derive(Debug, Clone)]
pub struct PretrainData {
    pub family: Family,
    pub seen: Vec<Vec<Episode>>,
    pub val: Vec<Episode>,
}

impl PretrainData {
    pub fn train(&self) -> Vec<Episode> {
        self.seen.iter().flatten().cloned().collect()
    }
}

fn task_demos(config: &LabConfig, spec: &TaskSpec, count: usize) -> Result<Vec<Episode>> {
    match &config.data.episodes {
        Some(dir) => Ok(EpisodeFile::load_task(dir, spec, count)?.into_iter().take(count).collect()),
        None => Ok(collect_demos(spec, count, config.policy.obs_encoder.obs_mode(), &Vocabulary::global(), 0)?),
    }
}

pub fn pretrain_data(config: &LabConfig, family: Family) -> Result<PretrainData> {
    let mode = config.policy.obs_encoder.obs_mode();
    let suite = TaskSuite::new(family);
    let mut seen = Vec::new();
    let mut val = Vec::new();
    for spec in suite.pretrain_tasks() {
        seen.push(task_demos(config, spec, config.data.pretrain_demos)?);
        val.extend(collect_demos(spec, config.data.val_demos, mode, &Vocabulary::global(), config.data.val_first_seed)?);
    }
    Ok(PretrainData { family, seen, val })
}

/// The first `adapt_tasks` adaptation tasks of the run's family with
/// `demos` demonstrations each.
pub fn adapt_sequence(config: &LabConfig, family: Family, demos: usize) -> Result<Vec<(TaskSpec, Vec<Episode>)>> {
    TaskSuite::new(family).adapt_tasks()[..config.data.adapt_tasks]
        .iter()
        .map(|spec| Ok((spec.clone(), task_demos(config, spec, demos)?)))
        .collect()
}

pub fn pretrain_base(config: &LabConfig, data: &PretrainData) -> Result<PretrainOutcome> {
    let init = Policy::new(config.policy.clone())?;
    Ok(pretrain(init, &data.train(), &data.val, &config.pretrain)?)
}

pub fn adapt(
    base: &Policy,
    data: &PretrainData,
    sequence: &[(TaskSpec, Vec<Episode>)],
    run: &RunConfig,
) -> Result<RunOutcome> {
    Ok(run_sequence(base, &data.seen, sequence, run)?)
}

use omla_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::seeding;
use crate::taskworld::{
    expert_action, generate_scene, observe, proprio, rollout, ObsMode, TaskId, TaskSpec, Vocabulary, EVAL_SEED_BASE,
    MAX_STEP,
};

/// Standard deviation of the motion noise injected while recording demos,
/// as a fraction of the largest move.
pub const DEMO_NOISE: f64 = 0.3;

/// One demonstration: the observation, proprioception and action at every
/// step, plus the tokenized task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task: TaskId,
    pub seed: u64,
    pub tokens: Vec<usize>,
    pub observations: Vec<Vec<f64>>,
    pub proprio: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.actions.len();
        if self.observations.len() != t || self.proprio.len() != t {
            return Err(CoreError::Contract(format!(
                "episode of {} has {} observations, {} proprio rows, {t} actions",
                self.task,
                self.observations.len(),
                self.proprio.len()
            )));
        }
        if t < 2 {
            return Err(CoreError::Contract(format!("episode of {} is shorter than 2 steps", self.task)));
        }
        if self.tokens.is_empty() {
            return Err(CoreError::Contract(format!("episode of {} has no description tokens", self.task)));
        }
        Ok(())
    }

    /// Rows `start..=end` of the observations as a matrix.
    pub fn obs_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        rows(&self.observations[start..=end])
    }

    pub fn proprio_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        rows(&self.proprio[start..=end])
    }

    pub fn action_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        rows(&self.actions[start..=end])
    }
}

pub(crate) fn rows(r: &[Vec<f64>]) -> Result<Tensor> {
    let width = r.first().map_or(0, Vec::len);
    if r.iter().any(|x| x.len() != width) {
        return Err(CoreError::Contract("ragged rows".into()));
    }
    Ok(Tensor::from_vec(&[r.len(), width], r.concat())?)
}

/// Expert demonstrations from the demonstration seed range. The executed
/// motion is perturbed by [`DEMO_NOISE`] while the recorded action is the
/// expert's clean action for the visited state. Failed rollouts are
/// skipped, so seeds are not necessarily contiguous.
pub fn collect_demos(spec: &TaskSpec, count: usize, mode: ObsMode, vocab: &Vocabulary, first_seed: u64) -> Result<Vec<Episode>> {
    let tokens = vocab.tokenize(&spec.description);
    let mut out = Vec::with_capacity(count);
    let mut seed = first_seed;
    while out.len() < count {
        if seed >= EVAL_SEED_BASE {
            return Err(CoreError::Contract(format!(
                "ran out of demonstration seeds for {} after {} episodes",
                spec.id,
                out.len()
            )));
        }
        let mut rng = seeding::rng(seed, "demo-noise");
        let noise = Normal::new(0.0, DEMO_NOISE * MAX_STEP).expect("positive std");
        let r = rollout(generate_scene(spec, seed), spec.horizon, |s, _| {
            let mut a = expert_action(s, spec);
            if a[0] != 0.0 || a[1] != 0.0 {
                for v in &mut a[..2] {
                    *v = (*v + noise.sample(&mut rng)).clamp(-MAX_STEP, MAX_STEP);
                }
            }
            a
        });
        if r.success && r.actions.len() >= 2 {
            out.push(Episode {
                task: spec.id,
                seed,
                tokens: tokens.clone(),
                observations: r.states.iter().map(|s| observe(s, mode)).collect(),
                proprio: r.states.iter().map(|s| proprio(s).to_vec()).collect(),
                actions: r.states.iter().map(|s| expert_action(s, spec).to_vec()).collect(),
            });
        }
        seed += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskworld::Family;

    #[test]
    fn demos_are_valid_and_deterministic() {
        let vocab = Vocabulary::global();
        let spec = TaskSpec::new(TaskId::new(Family::Object, 0));
        let a = collect_demos(&spec, 5, ObsMode::Flat, &vocab, 0).unwrap();
        let b = collect_demos(&spec, 5, ObsMode::Flat, &vocab, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        for e in &a {
            e.validate().unwrap();
            assert!(e.seed < EVAL_SEED_BASE);
        }
    }

    #[test]
    fn validate_rejects_mismatch() {
        let vocab = Vocabulary::global();
        let spec = TaskSpec::new(TaskId::new(Family::Goal, 4));
        let mut e = collect_demos(&spec, 1, ObsMode::Flat, &vocab, 0).unwrap().remove(0);
        e.actions.pop();
        assert!(e.validate().is_err());
    }
}

//! Closed-loop rollouts of a policy on held-out scenes.

use omla_autodiff::Tensor;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::policy::{Bound, Policy};
use crate::seeding;
use crate::taskworld::{eval_seed, generate_scene, observe, proprio, rollout, Scene, TaskSpec, Vocabulary};

/// Drives the taskworld from a policy, keeping the last `context_len` step
/// tokens so each step costs one encoder pass and one decode.
pub struct Controller<'a> {
    policy: &'a Policy,
    bound: Bound,
    lang: Tensor,
    history: Vec<Tensor>,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Controller<'a> {
    /// Acts with the mean of the heaviest mixture mode, or samples the
    /// mixture when `rng` is given.
    pub fn new(policy: &'a Policy, spec: &TaskSpec, rng: Option<ChaCha8Rng>) -> Result<Self> {
        let bound = policy.bind();
        let tokens = Vocabulary::global().tokenize(&spec.description);
        let lang = policy.encode_language(&bound, &tokens)?;
        Ok(Self { policy, bound, lang, history: Vec::new(), rng })
    }

    pub fn act(&mut self, scene: &Scene) -> Result<[f64; 3]> {
        let p = self.policy;
        let obs = Tensor::row(&observe(scene, p.config.obs_encoder.obs_mode()));
        let prop = Tensor::row(&proprio(scene));
        self.history.push(p.step_tokens(&self.bound, &obs, &prop)?);
        if self.history.len() > p.config.context_len {
            self.history.remove(0);
        }
        let refs: Vec<&Tensor> = self.history.iter().collect();
        let mix = p.decode(&self.bound, &self.lang, &Tensor::concat_rows(&refs)?)?;
        let dist = mix.step(mix.rows() - 1)?;
        let a = match self.rng.as_mut() {
            Some(rng) => dist.sample(rng),
            None => dist.mode_mean().to_vec(),
        };
        let a = p.denormalize(&a);
        Ok([a[0], a[1], a[2]])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub rollouts: usize,
    /// Sample actions instead of taking the mode mean; `Some(seed)` fixes the draws.
    pub stochastic: Option<u64>,
}

impl EvalOptions {
    pub fn deterministic(rollouts: usize) -> Self {
        Self { rollouts, stochastic: None }
    }
}

/// Success rate of `policy` (with whatever adapter is attached) over the
/// first `rollouts` evaluation scenes of `spec`.
pub fn evaluate(policy: &Policy, spec: &TaskSpec, opts: EvalOptions) -> Result<f64> {
    if opts.rollouts == 0 {
        return Err(CoreError::Contract("evaluation needs at least one rollout".into()));
    }
    let outcomes: Vec<Result<bool>> = (0..opts.rollouts)
        .into_par_iter()
        .map(|i| {
            let rng = opts.stochastic.map(|s| seeding::rng(seeding::mix(s, i as u64), "eval"));
            let mut ctl = Controller::new(policy, spec, rng)?;
            let mut err = None;
            let r = rollout(generate_scene(spec, eval_seed(i)), spec.horizon, |s, _| match ctl.act(s) {
                Ok(a) => a,
                Err(e) => {
                    err.get_or_insert(e);
                    [0.0; 3]
                }
            });
            match err {
                Some(e) => Err(e),
                None => Ok(r.success),
            }
        })
        .collect();
    let mut wins = 0usize;
    for o in outcomes {
        wins += o? as usize;
    }
    Ok(wins as f64 / opts.rollouts as f64)
}

/// Success rate of an arbitrary controller, built fresh for every scene.
pub fn success_rate<F, C>(spec: &TaskSpec, rollouts: usize, make: F) -> Result<f64>
where
    F: Fn(usize) -> C,
    C: FnMut(&Scene, usize) -> [f64; 3],
{
    if rollouts == 0 {
        return Err(CoreError::Contract("evaluation needs at least one rollout".into()));
    }
    let wins = (0..rollouts)
        .filter(|&i| rollout(generate_scene(spec, eval_seed(i)), spec.horizon, make(i)).success)
        .count();
    Ok(wins as f64 / rollouts as f64)
}

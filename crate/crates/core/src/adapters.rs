//! Low-rank adapters over frozen linear layers and per-task registries.

use std::collections::BTreeMap;

use omla_autodiff::{Tape, Tensor};
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::policy::{LoraBound, ObsEncoder, Policy, PolicyConfig, PolicyParams};
use crate::seeding;
use crate::taskworld::TaskId;

#[derive(Debug, Clone)]
pub struct LoraPair {
    pub target: String,
    /// r × k
    pub a: Tensor,
    /// d × r
    pub b: Tensor,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraPair {
    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// φ for one task: every adapted layer's (B, A) pair.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub task: TaskId,
    pub pairs: BTreeMap<String, LoraPair>,
    pub trainable: bool,
}

/// The observation encoder's projections, the attention query/value
/// projections of every temporal block, and both head layers.
pub fn default_targets(config: &PolicyConfig) -> Vec<String> {
    let mut t: Vec<String> = match config.obs_encoder {
        ObsEncoder::FlatMlp => vec!["obs.fc1".into(), "obs.fc2".into()],
        ObsEncoder::PatchAttention => vec!["obs.patch".into(), "obs.fc".into()],
    };
    for l in 0..config.num_layers {
        t.push(format!("temporal.{l}.attn.query"));
        t.push(format!("temporal.{l}.attn.value"));
    }
    t.push("head.fc1".into());
    t.push("head.fc2".into());
    t
}

fn target_shape(params: &PolicyParams, target: &str) -> Result<(usize, usize)> {
    let w = params
        .get(&format!("{target}.weight"))
        .ok_or_else(|| CoreError::Registry(format!("unknown adapter target `{target}`")))?;
    Ok((w.shape()[0], w.shape()[1]))
}

/// Fresh adapters: A ~ N(0, 1/r), B = 0, so the initial delta is exactly zero.
pub fn init_adapters(
    params: &PolicyParams,
    targets: &[String],
    rank: usize,
    scaling: f64,
    task: TaskId,
    seed: u64,
) -> Result<AdapterSet> {
    if targets.is_empty() {
        return Err(CoreError::Contract("adapter target list is empty".into()));
    }
    if rank == 0 {
        return Err(CoreError::Config("adapter rank must be positive".into()));
    }
    let mut rng = seeding::rng(seed, "adapter-init");
    let normal = Normal::new(0.0, (1.0 / rank as f64).sqrt()).expect("positive variance");
    let mut pairs = BTreeMap::new();
    for target in targets {
        let (d, k) = target_shape(params, target)?;
        if rank > d.min(k) {
            return Err(CoreError::Config(format!(
                "rank {rank} exceeds min({d}, {k}) for `{target}`"
            )));
        }
        let a = Tensor::from_vec(&[rank, k], (0..rank * k).map(|_| normal.sample(&mut rng)).collect())?;
        let b = Tensor::zeros(&[d, rank]);
        pairs.insert(
            target.clone(),
            LoraPair { target: target.clone(), a, b, rank, scaling },
        );
    }
    Ok(AdapterSet { task, pairs, trainable: true })
}

impl AdapterSet {
    /// Σ r·(d + k) over pairs.
    pub fn param_count(&self) -> usize {
        self.pairs.values().map(LoraPair::param_count).sum()
    }

    pub fn bound(&self) -> BTreeMap<String, LoraBound> {
        self.pairs
            .iter()
            .map(|(k, p)| (k.clone(), LoraBound { a: p.a.clone(), b: p.b.clone(), scaling: p.scaling }))
            .collect()
    }

    /// Names of the trainable tensors, `target.lora_a` / `target.lora_b`.
    pub fn tensor_names(&self) -> Vec<String> {
        self.pairs
            .keys()
            .flat_map(|t| [format!("{t}.lora_a"), format!("{t}.lora_b")])
            .collect()
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.pairs
            .iter()
            .flat_map(|(t, p)| [(format!("{t}.lora_a"), p.a.clone()), (format!("{t}.lora_b"), p.b.clone())])
            .collect()
    }

    /// Records every adapter tensor as a leaf on `tape`.
    pub fn leaves(&self, tape: &Tape) -> (BTreeMap<String, LoraBound>, Vec<(String, Tensor)>) {
        let mut lora = BTreeMap::new();
        let mut leaves = Vec::new();
        for (t, p) in &self.pairs {
            let a = tape.leaf(&p.a);
            let b = tape.leaf(&p.b);
            leaves.push((format!("{t}.lora_a"), a.clone()));
            leaves.push((format!("{t}.lora_b"), b.clone()));
            lora.insert(t.clone(), LoraBound { a, b, scaling: p.scaling });
        }
        (lora, leaves)
    }

    /// Rebuilds the bound form from tensors in `tensor_names` order.
    pub fn bound_from(&self, values: &[Tensor]) -> BTreeMap<String, LoraBound> {
        self.pairs
            .iter()
            .zip(values.chunks(2))
            .map(|((t, p), ab)| (t.clone(), LoraBound { a: ab[0].clone(), b: ab[1].clone(), scaling: p.scaling }))
            .collect()
    }

    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let (target, which) = name
            .rsplit_once('.')
            .ok_or_else(|| CoreError::Registry(format!("malformed adapter tensor `{name}`")))?;
        let pair = self
            .pairs
            .get_mut(target)
            .ok_or_else(|| CoreError::Registry(format!("unknown adapter target `{target}`")))?;
        let slot = match which {
            "lora_a" => &mut pair.a,
            "lora_b" => &mut pair.b,
            _ => return Err(CoreError::Registry(format!("malformed adapter tensor `{name}`"))),
        };
        if slot.shape() != value.shape() {
            return Err(CoreError::Contract(format!("shape mismatch for `{name}`")));
        }
        *slot = value.detach();
        Ok(())
    }

    pub fn with_task(mut self, task: TaskId) -> Self {
        self.task = task;
        self
    }

    /// Bit-level equality of every adapter tensor.
    pub fn bit_eq(&self, other: &AdapterSet) -> bool {
        self.pairs.len() == other.pairs.len()
            && self.pairs.iter().zip(&other.pairs).all(|((ta, a), (tb, b))| {
                ta == tb && bits(&a.a) == bits(&b.a) && bits(&a.b) == bits(&b.b)
            })
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Per-task adapter sets for plug-and-play switching.
#[derive(Debug, Clone, Default)]
pub struct AdapterRegistry {
    sets: BTreeMap<TaskId, AdapterSet>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, set: AdapterSet) {
        self.sets.insert(set.task, set);
    }

    pub fn get(&self, task: TaskId) -> Option<&AdapterSet> {
        self.sets.get(&task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.sets.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AdapterSet> {
        self.sets.values()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

impl Policy {
    /// Routes every targeted layer through its adapter. Base weights stay
    /// untouched; targets must exist, be frozen and match the pair shapes.
    pub fn attach(&mut self, set: &AdapterSet) -> Result<()> {
        for (target, pair) in &set.pairs {
            let (d, k) = target_shape(&self.params, target)?;
            if pair.a.shape() != [pair.rank, k] || pair.b.shape() != [d, pair.rank] {
                return Err(CoreError::Registry(format!("adapter for `{target}` does not fit {d} × {k}")));
            }
            if self.params.is_frozen(&format!("{target}.weight")) != Some(true) {
                return Err(CoreError::Contract(format!("adapter target `{target}` is not frozen")));
            }
        }
        self.attached = Some(set.clone());
        Ok(())
    }

    pub fn detach(&mut self) -> Option<AdapterSet> {
        self.attached.take()
    }

    pub fn attached(&self) -> Option<&AdapterSet> {
        self.attached.as_ref()
    }

    /// Detaches whatever is attached and attaches the set registered for `task`.
    pub fn swap_task(&mut self, registry: &AdapterRegistry, task: TaskId) -> Result<()> {
        let set = registry
            .get(task)
            .ok_or_else(|| CoreError::Registry(format!("no adapters registered for {task}")))?;
        self.detach();
        self.attach(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskworld::Family;

    fn frozen_policy() -> Policy {
        let mut p = Policy::new(PolicyConfig::desk_scale()).unwrap();
        p.params.freeze_all();
        p
    }

    fn task(i: usize) -> TaskId {
        TaskId::new(Family::Object, i)
    }

    #[test]
    fn count_matches_formula() {
        let p = frozen_policy();
        let set = init_adapters(&p.params, &default_targets(&p.config), 4, 1.0, task(0), 0).unwrap();
        let expected: usize = set
            .pairs
            .keys()
            .map(|t| {
                let (d, k) = target_shape(&p.params, t).unwrap();
                4 * (d + k)
            })
            .sum();
        assert_eq!(set.param_count(), expected);
        let empty = AdapterSet { task: task(0), pairs: BTreeMap::new(), trainable: true };
        assert_eq!(empty.param_count(), 0);
    }

    #[test]
    fn rank_above_min_dim_rejected() {
        let p = frozen_policy();
        let err = init_adapters(&p.params, &["head.fc2".into()], 36, 1.0, task(0), 0);
        assert!(matches!(err, Err(CoreError::Config(_))));
    }

    #[test]
    fn unknown_target_and_empty_list() {
        let p = frozen_policy();
        assert!(matches!(
            init_adapters(&p.params, &["nope".into()], 2, 1.0, task(0), 0),
            Err(CoreError::Registry(_))
        ));
        assert!(init_adapters(&p.params, &[], 2, 1.0, task(0), 0).is_err());
    }

    #[test]
    fn same_seed_same_a() {
        let p = frozen_policy();
        let t = default_targets(&p.config);
        let a = init_adapters(&p.params, &t, 4, 1.0, task(0), 9).unwrap();
        let b = init_adapters(&p.params, &t, 4, 1.0, task(0), 9).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_adapters(&p.params, &t, 4, 1.0, task(0), 10).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn attach_requires_frozen_target() {
        let mut p = Policy::new(PolicyConfig::desk_scale()).unwrap();
        let set = init_adapters(&p.params, &default_targets(&p.config), 4, 1.0, task(0), 0).unwrap();
        assert!(matches!(p.attach(&set), Err(CoreError::Contract(_))));
    }

    #[test]
    fn swap_to_unregistered_task_fails() {
        let mut p = frozen_policy();
        let reg = AdapterRegistry::new();
        assert!(matches!(p.swap_task(&reg, task(3)), Err(CoreError::Registry(_))));
    }
}

//! Versioned binary container for base weights, per-task adapters and
//! sampler states.
//!
//! Layout (all integers little-endian): magic, version `u32`, producing
//! config hash, pretraining family, policy config as JSON, then the tensor
//! table `(name, frozen, rank, extents, f64 payload)`, the adapter tables
//! and the rng states. Strings are `u32` length plus UTF-8.

use std::collections::BTreeMap;
use std::path::Path;

use omla_autodiff::Tensor;
use omla_core::adapters::{AdapterSet, LoraPair};
use omla_core::policy::{param_shapes, Policy, PolicyConfig, PolicyParams};
use omla_core::taskworld::{Family, TaskId};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{LabError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OMLACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub label: String,
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(label: &str, rng: &ChaCha8Rng) -> Self {
        Self { label: label.into(), seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub frozen: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Family whose pretraining tasks produced the base.
    pub family: Family,
    pub policy: PolicyConfig,
    /// Base weights in name order; empty for adapter-only checkpoints.
    pub tensors: Vec<NamedTensor>,
    pub adapters: Vec<AdapterSet>,
    pub rngs: Vec<RngState>,
}

impl Checkpoint {
    pub fn from_policy(policy: &Policy, family: Family, config_hash: &str) -> Self {
        let tensors = policy
            .params
            .iter()
            .map(|(name, p)| NamedTensor { name: name.to_string(), frozen: p.frozen, value: p.value.clone() })
            .collect();
        Self {
            config_hash: config_hash.into(),
            family,
            policy: policy.config.clone(),
            tensors,
            adapters: Vec::new(),
            rngs: Vec::new(),
        }
    }

    pub fn adapters_only(policy: &PolicyConfig, family: Family, config_hash: &str, adapters: Vec<AdapterSet>) -> Self {
        Self { config_hash: config_hash.into(), family, policy: policy.clone(), tensors: Vec::new(), adapters, rngs: Vec::new() }
    }

    /// The base policy, shapes checked against the embedded config.
    pub fn to_policy(&self) -> Result<Policy> {
        if self.tensors.is_empty() {
            return Err(LabError::Config("checkpoint holds adapters only, no base weights".into()));
        }
        let map: BTreeMap<String, Tensor> = self.tensors.iter().map(|t| (t.name.clone(), t.value.clone())).collect();
        let mut params = PolicyParams::from_tensors(&self.policy, map, false)?;
        for t in &self.tensors {
            params.set_frozen(&t.name, t.frozen)?;
        }
        Ok(Policy::from_params(self.policy.clone(), params)?)
    }

    pub fn adapter(&self, task: TaskId) -> Option<&AdapterSet> {
        self.adapters.iter().find(|a| a.task == task)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.config_hash);
        w.str(self.family.name());
        w.str(&serde_json::to_string(&self.policy).expect("policy config serializes"));
        w.len(self.tensors.len());
        for t in &self.tensors {
            w.str(&t.name);
            w.u8(t.frozen as u8);
            w.tensor(&t.value);
        }
        w.len(self.adapters.len());
        for set in &self.adapters {
            w.str(&set.task.to_string());
            w.u8(set.trainable as u8);
            w.len(set.pairs.len());
            for pair in set.pairs.values() {
                w.str(&pair.target);
                w.u64(pair.rank as u64);
                w.f64(pair.scaling);
                w.tensor(&pair.a);
                w.tensor(&pair.b);
            }
        }
        w.len(self.rngs.len());
        for r in &self.rngs {
            w.str(&r.label);
            w.bytes(&r.seed);
            w.u64(r.stream);
            w.u128(r.word_pos);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(LabError::corrupt(path, format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.str()?;
        let family: Family = r.str()?.parse().map_err(|e| r.corrupt(format!("{e}")))?;
        let policy: PolicyConfig = serde_json::from_str(&r.str()?).map_err(|e| r.corrupt(e.to_string()))?;
        policy.validate()?;
        let shapes: BTreeMap<String, Vec<usize>> = param_shapes(&policy).into_iter().collect();

        let n = r.len()?;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.str()?;
            let frozen = r.bool()?;
            let value = r.tensor()?;
            tensors.push(NamedTensor { name, frozen, value });
        }
        let n = r.len()?;
        let mut adapters = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let task: TaskId = r.str()?.parse().map_err(|e| r.corrupt(format!("{e}")))?;
            let trainable = r.bool()?;
            let count = r.len()?;
            let mut pairs = BTreeMap::new();
            for _ in 0..count {
                let target = r.str()?;
                let rank = r.u64()? as usize;
                let scaling = r.f64()?;
                let a = r.tensor()?;
                let b = r.tensor()?;
                let w = shapes
                    .get(&format!("{target}.weight"))
                    .ok_or_else(|| LabError::mismatch(path, format!("adapter target `{target}` is not a policy layer")))?;
                if a.shape() != [rank, w[1]] || b.shape() != [w[0], rank] {
                    return Err(LabError::mismatch(path, format!("adapter for `{target}` does not fit {w:?}")));
                }
                pairs.insert(target.clone(), LoraPair { target, a, b, rank, scaling });
            }
            adapters.push(AdapterSet { task, pairs, trainable });
        }
        let n = r.len()?;
        let mut rngs = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let label = r.str()?;
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            rngs.push(RngState { label, seed, stream: r.u64()?, word_pos: r.u128()? });
        }
        r.finish()?;

        let ckpt = Self { config_hash, family, policy, tensors, adapters, rngs };
        if !ckpt.tensors.is_empty() {
            ckpt.to_policy().map_err(|e| LabError::mismatch(path, e.to_string()))?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use omla_core::adapters::{default_targets, init_adapters};
    use omla_core::seeding;
    use rand_chacha::rand_core::RngCore;

    fn sample() -> Checkpoint {
        let config = PolicyConfig { embed_dim: 8, ffn_dim: 8, obs_hidden: 8, head_hidden: 8, ..PolicyConfig::desk_scale() };
        let mut policy = Policy::new(config).unwrap();
        policy.params.freeze_all();
        let mut ckpt = Checkpoint::from_policy(&policy, Family::Goal, "abc");
        let task = TaskId::new(Family::Object, 6);
        ckpt.adapters.push(init_adapters(&policy.params, &default_targets(&policy.config), 2, 1.0, task, 3).unwrap());
        let mut rng = seeding::rng(5, "pretrain");
        rng.next_u64();
        ckpt.rngs.push(RngState::capture("pretrain", &rng));
        ckpt
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.to_policy().unwrap().params.full_hash(), ckpt.to_policy().unwrap().params.full_hash());
        assert_eq!(back.family, Family::Goal);
        assert!(back.adapter(TaskId::new(Family::Object, 6)).unwrap().bit_eq(&ckpt.adapters[0]));
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = seeding::rng(9, "x");
        rng.next_u64();
        let state = RngState::capture("x", &rng);
        let mut resumed = state.restore();
        assert_eq!(resumed.next_u64(), rng.next_u64());
    }

    #[test]
    fn damage_is_detected() {
        let bytes = sample().to_bytes();
        let p = Path::new("mem");
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p), Err(LabError::Corrupt { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic, p).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version, p).is_err());
    }

    #[test]
    fn shapes_are_checked_against_the_config() {
        let mut ckpt = sample();
        ckpt.policy.embed_dim = 16;
        ckpt.policy.ffn_dim = 16;
        let e = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{e}");
    }

    #[test]
    fn adapter_only_checkpoints_have_no_policy() {
        let full = sample();
        let only = Checkpoint::adapters_only(&full.policy, full.family, "h", full.adapters.clone());
        let back = Checkpoint::from_bytes(&only.to_bytes(), Path::new("mem")).unwrap();
        assert!(back.to_policy().is_err());
        assert_eq!(back.adapters.len(), 1);
    }
}

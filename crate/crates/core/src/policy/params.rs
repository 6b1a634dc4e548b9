use std::collections::BTreeMap;

use omla_autodiff::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{ObsEncoder, PolicyConfig};
use crate::error::{CoreError, Result};
use crate::seeding;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameter table of the base policy.
#[derive(Debug, Clone, Default)]
pub struct PolicyParams {
    entries: BTreeMap<String, Param>,
}

fn gaussian<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("finite init")
}

/// Every weight name with its shape, in a fixed order.
pub fn param_shapes(c: &PolicyConfig) -> Vec<(String, Vec<usize>)> {
    let e = c.embed_dim;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let linear = |out: &mut Vec<(String, Vec<usize>)>, name: &str, out_dim: usize, in_dim: usize| {
        out.push((format!("{name}.weight"), vec![out_dim, in_dim]));
        out.push((format!("{name}.bias"), vec![1, out_dim]));
    };
    let norm = |name: String| [(format!("{name}.gain"), vec![1, e]), (format!("{name}.bias"), vec![1, e])];
    match c.obs_encoder {
        ObsEncoder::FlatMlp => {
            linear(&mut out, "obs.fc1", c.obs_hidden, c.obs_dim);
            linear(&mut out, "obs.fc2", e, c.obs_hidden);
        }
        ObsEncoder::PatchAttention => {
            linear(&mut out, "obs.patch", e, c.patch_dim());
            linear(&mut out, "obs.pool.key", e, e);
            linear(&mut out, "obs.pool.value", e, e);
            linear(&mut out, "obs.fc", e, e);
        }
    }
    linear(&mut out, "prop.fc1", c.proprio_hidden, c.proprio_dim);
    linear(&mut out, "prop.fc2", e, c.proprio_hidden);
    for l in 0..c.num_layers {
        out.extend(norm(format!("temporal.{l}.norm1")));
        out.extend(norm(format!("temporal.{l}.norm2")));
        for p in ["query", "key", "value", "out"] {
            linear(&mut out, &format!("temporal.{l}.attn.{p}"), e, e);
        }
        linear(&mut out, &format!("temporal.{l}.ffn.fc1"), c.ffn_dim, e);
        linear(&mut out, &format!("temporal.{l}.ffn.fc2"), e, c.ffn_dim);
    }
    out.extend(norm("head.norm".into()));
    linear(&mut out, "head.fc1", c.head_hidden, e);
    linear(&mut out, "head.fc2", c.head_out_dim(), c.head_hidden);
    out.push(("lang.embed".into(), vec![c.vocab_size, e]));
    out.push(("lang.type".into(), vec![1, e]));
    out.push(("act.token".into(), vec![1, e]));
    out.push(("pos.embed".into(), vec![c.context_len, e]));
    if c.obs_encoder == ObsEncoder::PatchAttention {
        out.push(("obs.patch_pos".into(), vec![c.num_patches(), e]));
        out.push(("obs.pool.query".into(), vec![1, e]));
    }
    out
}

impl PolicyParams {
    pub fn init(config: &PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng(config.init_seed, "policy-init");
        let mut entries = BTreeMap::new();
        for (name, shape) in param_shapes(config) {
            let value = if name.ends_with(".gain") {
                Tensor::ones(&shape)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".weight") {
                let std = 1.0 / (shape[1] as f64).sqrt();
                let std = if name == "head.fc2.weight" { 0.1 * std } else { std };
                gaussian(&mut rng, &shape, std)
            } else if name == "lang.embed" {
                gaussian(&mut rng, &shape, 1.0)
            } else {
                gaussian(&mut rng, &shape, 0.1)
            };
            entries.insert(name, Param { value, frozen: false });
        }
        Ok(Self { entries })
    }

    /// Builds a table from explicit tensors, checking every expected name
    /// is present with the expected shape and nothing else is.
    pub fn from_tensors(config: &PolicyConfig, tensors: BTreeMap<String, Tensor>, frozen: bool) -> Result<Self> {
        let expected = param_shapes(config);
        if tensors.len() != expected.len() {
            return Err(CoreError::Config(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut entries = BTreeMap::new();
        for (name, shape) in expected {
            let t = tensors
                .get(&name)
                .ok_or_else(|| CoreError::Config(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(CoreError::Config(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    shape
                )));
            }
            entries.insert(name, Param { value: t.detach(), frozen });
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| CoreError::Registry(format!("unknown weight `{name}`")))
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.entries.get(name).map(|p| p.frozen)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces a trainable tensor. Frozen weights refuse updates.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::Registry(format!("unknown weight `{name}`")))?;
        if p.frozen {
            return Err(CoreError::Contract(format!("weight `{name}` is frozen")));
        }
        if p.value.shape() != value.shape() {
            return Err(CoreError::Contract(format!(
                "weight `{name}` has shape {:?}, update has {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value.detach();
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = false;
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| CoreError::Registry(format!("unknown weight `{name}`")))?;
        p.frozen = frozen;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over name, shape and exact bit pattern of every frozen tensor.
    pub fn frozen_hash(&self) -> String {
        self.hash_where(|_, p| p.frozen)
    }

    pub fn full_hash(&self) -> String {
        self.hash_where(|_, _| true)
    }

    /// Hash restricted to weights whose name starts with `prefix`.
    pub fn prefix_hash(&self, prefix: &str) -> String {
        self.hash_where(|n, _| n.starts_with(prefix))
    }

    fn hash_where(&self, keep: impl Fn(&str, &Param) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            if !keep(name, p) {
                continue;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

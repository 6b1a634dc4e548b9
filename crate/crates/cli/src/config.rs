//! The lab's TOML config: every section mirrors a core config and unknown
//! keys are rejected at any depth.

use std::path::{Path, PathBuf};

use omla_core::continual::{PretrainConfig, RunConfig};
use omla_core::policy::PolicyConfig;
use omla_core::taskworld::{Family, PRETRAIN_TASKS, TASKS_PER_FAMILY};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Demonstrations per pretraining task.
    pub pretrain_demos: usize,
    /// Held-out demonstrations per pretraining task for the plateau check.
    pub val_demos: usize,
    pub val_first_seed: u64,
    /// Adaptation tasks taken from the family, in order.
    pub adapt_tasks: usize,
    /// Read episode files from here instead of generating demonstrations.
    pub episodes: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { pretrain_demos: 50, val_demos: 4, val_first_seed: 500, adapt_tasks: TASKS_PER_FAMILY - PRETRAIN_TASKS, episodes: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    /// One run per seed; replaces `run.seed`.
    pub seeds: Vec<u64>,
    /// Family the base is pretrained on; defaults to what the scenario needs.
    pub pretrain_family: Option<Family>,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    /// Missing keys fall back to the desk-scale policy.
    #[serde(deserialize_with = "desk_policy")]
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    /// Nested tables fall back to the run defaults, not their own.
    #[serde(deserialize_with = "run_defaults")]
    pub run: RunConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            pretrain_family: None,
            out: None,
            data: DataConfig::default(),
            policy: PolicyConfig::desk_scale(),
            pretrain: PretrainConfig::default(),
            run: RunConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Deserializes `T` from a table laid over the rendering of `base`.
fn over<'de, D, T>(d: D, base: T) -> std::result::Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: Serialize + serde::de::DeserializeOwned,
{
    use serde::de::Error;
    let overrides = toml::Table::deserialize(d)?;
    let mut table = toml::Table::try_from(base).map_err(D::Error::custom)?;
    merge(&mut table, overrides);
    table.try_into().map_err(D::Error::custom)
}

fn desk_policy<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<PolicyConfig, D::Error> {
    over(d, PolicyConfig::desk_scale())
}

fn run_defaults<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<RunConfig, D::Error> {
    over(d, RunConfig::default())
}

impl LabConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: LabConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must not be empty".into()));
        }
        if self.data.pretrain_demos == 0 || self.data.val_demos == 0 {
            return Err(LabError::Config("pretrain_demos and val_demos must be at least 1".into()));
        }
        let adapt = TASKS_PER_FAMILY - PRETRAIN_TASKS;
        if self.data.adapt_tasks == 0 || self.data.adapt_tasks > adapt {
            return Err(LabError::Config(format!("adapt_tasks must be within 1..={adapt}")));
        }
        self.policy.validate()?;
        self.run.validate()?;
        Ok(())
    }

    /// The config exactly as resolved, defaults included.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("lab config serializes")
    }

    /// SHA-256 of the resolved rendering.
    pub fn hash(&self) -> String {
        sha256_hex(self.resolved().as_bytes())
    }

    pub fn pretrain_family(&self) -> Family {
        self.pretrain_family.unwrap_or_else(|| self.run.scenario.pretrain_family(self.run.family))
    }

    /// `run` with the seed replaced.
    pub fn run_for_seed(&self, seed: u64) -> RunConfig {
        RunConfig { seed, ..self.run.clone() }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::metalearn::MetaConfig;
use crate::optim::AdamConfig;
use crate::policy::params::hex;
use crate::taskworld::Family;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Omla,
    Lora,
    Er,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Omla, Method::Lora, Method::Er];

    pub fn name(self) -> &'static str {
        match self {
            Method::Omla => "omla",
            Method::Lora => "lora",
            Method::Er => "er",
        }
    }

    pub fn uses_adapters(self) -> bool {
        !matches!(self, Method::Er)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown method `{s}` (omla, lora, er)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Scenario {
    #[default]
    #[serde(rename = "standard")]
    Standard,
    /// The base was pretrained on another family's first five tasks.
    #[serde(rename = "s1")]
    MismatchedPretrain,
    /// The meta pool never grows beyond the pretraining datasets.
    #[serde(rename = "s2")]
    PretrainPoolOnly,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Standard, Scenario::MismatchedPretrain, Scenario::PretrainPoolOnly];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Standard => "standard",
            Scenario::MismatchedPretrain => "s1",
            Scenario::PretrainPoolOnly => "s2",
        }
    }

    /// Family whose first five tasks the base must have been pretrained on.
    pub fn pretrain_family(self, family: Family) -> Family {
        match (self, family) {
            (Scenario::MismatchedPretrain, Family::Goal) => Family::Object,
            (Scenario::MismatchedPretrain, _) => Family::Goal,
            _ => family,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown scenario `{s}` (standard, s1, s2)")))
    }
}

/// One continual-adaptation run over a family's adaptation tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub scenario: Scenario,
    pub family: Family,
    /// Demonstrations per adaptation task.
    pub demos: usize,
    pub seed: u64,
    pub finetune_steps: usize,
    /// Windows per fine-tuning step; for er, half come from the replay buffer.
    pub batch_size: usize,
    pub finetune: AdamConfig,
    pub eval_rollouts: usize,
    /// Evaluations spread evenly over fine-tuning.
    pub snapshots: usize,
    /// Sample actions during evaluation instead of acting on the mode mean.
    pub stochastic_eval: bool,
    pub rank: usize,
    pub lora_scaling: f64,
    /// Adapter targets; empty means the policy's default targets.
    pub targets: Vec<String>,
    pub meta: MetaConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Omla,
            scenario: Scenario::Standard,
            family: Family::Object,
            demos: 20,
            seed: 0,
            finetune_steps: 1000,
            batch_size: 16,
            finetune: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            eval_rollouts: 20,
            snapshots: 10,
            stochastic_eval: false,
            rank: 8,
            lora_scaling: 1.0,
            targets: Vec::new(),
            meta: MetaConfig { inner_lr: 1e-3, ..MetaConfig::default() },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.demos == 0 {
            return Err(CoreError::Config("demos must be at least 1".into()));
        }
        if self.eval_rollouts == 0 {
            return Err(CoreError::Config("eval_rollouts must be at least 1".into()));
        }
        if self.snapshots == 0 {
            return Err(CoreError::Config("snapshots must be at least 1".into()));
        }
        if self.batch_size == 0 || (self.method == Method::Er && self.batch_size < 2) {
            return Err(CoreError::Config("batch_size too small for the method".into()));
        }
        if self.rank == 0 {
            return Err(CoreError::Config("rank must be at least 1".into()));
        }
        if self.method == Method::Omla {
            self.meta.validate()?;
        }
        Ok(())
    }

    /// Meta steps actually taken per task.
    pub fn meta_steps(&self) -> usize {
        match self.method {
            Method::Omla => self.meta.meta_steps,
            _ => 0,
        }
    }

    /// SHA-256 of the config's debug rendering, which covers every field.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(format!("{self:?}").as_bytes()))
    }

    /// Fine-tuning steps after which a snapshot is evaluated:
    /// `round(N·s/S)` for `s = 1..=S`, deduplicated; `[0]` when `N = 0`.
    pub fn snapshot_steps(&self) -> Vec<usize> {
        let n = self.finetune_steps;
        if n == 0 {
            return vec![0];
        }
        let s = self.snapshots;
        let mut steps: Vec<usize> = (1..=s).map(|i| ((n * i) as f64 / s as f64).round() as usize).filter(|&v| v > 0).collect();
        steps.dedup();
        steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_cadence() {
        let c = RunConfig { finetune_steps: 100, snapshots: 10, ..RunConfig::default() };
        assert_eq!(c.snapshot_steps(), (1..=10).map(|i| i * 10).collect::<Vec<_>>());
        let c = RunConfig { finetune_steps: 0, ..c };
        assert_eq!(c.snapshot_steps(), vec![0]);
        let c = RunConfig { finetune_steps: 3, snapshots: 10, ..c };
        assert_eq!(c.snapshot_steps(), vec![1, 2, 3]);
    }

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("ewc".parse::<Method>().is_err());
    }

    #[test]
    fn hash_tracks_fields() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation() {
        RunConfig::default().validate().unwrap();
        assert!(RunConfig { demos: 0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { eval_rollouts: 0, ..RunConfig::default() }.validate().is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::Result;
use crate::policy::Policy;
use crate::taskworld::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Frozen observation-encoder output, as cached by the meta sampler.
    #[default]
    Observation,
    /// The [ACT] token after the temporal blocks, adapters included.
    Act,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub task: TaskId,
    pub episode: usize,
    pub step: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub kind: FeatureKind,
    pub width: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["task".to_string(), "episode".into(), "step".into()];
        h.extend((0..self.width).map(|i| format!("f{i}")));
        h
    }
}

/// One row per step of every episode.
pub fn export_features(policy: &Policy, episodes: &[Episode], kind: FeatureKind) -> Result<FeatureTable> {
    let width = policy.config.embed_dim;
    let mut rows = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        ep.validate()?;
        let feats: Vec<Vec<f64>> = match kind {
            FeatureKind::Observation => {
                let f = policy.observation_features(ep)?;
                f.data().chunks(width).map(<[f64]>::to_vec).collect()
            }
            FeatureKind::Act => (0..ep.len()).map(|t| Ok(policy.act_features(ep, t)?.to_vec())).collect::<Result<_>>()?,
        };
        for (step, values) in feats.into_iter().enumerate() {
            rows.push(FeatureRow { task: ep.task, episode: e, step, values });
        }
    }
    Ok(FeatureTable { kind, width, rows })
}

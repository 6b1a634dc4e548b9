use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::taskworld::{ObsMode, ACTION_DIM, FLAT_OBS_DIM, IMAGE_CHANNELS, IMAGE_SIDE, PATCH_SIDE, PROPRIO_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsEncoder {
    #[default]
    FlatMlp,
    PatchAttention,
}

impl ObsEncoder {
    pub fn obs_mode(self) -> ObsMode {
        match self {
            ObsEncoder::FlatMlp => ObsMode::Flat,
            ObsEncoder::PatchAttention => ObsMode::Image,
        }
    }
}

/// How the single [ACT] output is turned into action predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    /// One mixture per window step, conditioned on that step's position.
    #[default]
    WindowSum,
    /// One mixture for the newest step only.
    LastStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub context_len: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub gmm_modes: usize,
    pub obs_encoder: ObsEncoder,
    pub obs_hidden: usize,
    pub proprio_hidden: usize,
    pub head_hidden: usize,
    pub obs_dim: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub vocab_size: usize,
    pub positional: bool,
    pub head_mode: HeadMode,
    /// Divides raw actions before the likelihood; multiplies predictions.
    pub action_scale: Vec<f64>,
    /// Log-scales are squashed into `(-bound, bound)`.
    pub log_scale_bound: f64,
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            context_len: 10,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 1,
            ffn_dim: 128,
            gmm_modes: 5,
            obs_encoder: ObsEncoder::FlatMlp,
            obs_hidden: 128,
            proprio_hidden: 32,
            head_hidden: 128,
            obs_dim: FLAT_OBS_DIM,
            proprio_dim: PROPRIO_DIM,
            action_dim: ACTION_DIM,
            vocab_size: crate::taskworld::Vocabulary::global().len(),
            positional: true,
            head_mode: HeadMode::WindowSum,
            action_scale: vec![0.1, 0.1, 1.0],
            log_scale_bound: 2.0,
            init_seed: 0,
        }
    }
}

impl PolicyConfig {
    /// Widths comparable to a real visuomotor transformer, used to check
    /// the adapter-to-base size ratio. Too large to train here.
    pub fn wide_scale() -> Self {
        Self {
            embed_dim: 512,
            num_heads: 8,
            num_layers: 6,
            ffn_dim: 2048,
            obs_hidden: 512,
            proprio_hidden: 128,
            head_hidden: 1024,
            ..Self::default()
        }
    }

    /// Small enough that a full continual run takes seconds on one core.
    pub fn desk_scale() -> Self {
        Self {
            context_len: 1,
            embed_dim: 32,
            num_heads: 2,
            num_layers: 2,
            ffn_dim: 64,
            obs_hidden: 64,
            proprio_hidden: 16,
            head_hidden: 64,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn head_out_dim(&self) -> usize {
        self.gmm_modes * (1 + 2 * self.action_dim)
    }

    pub fn num_patches(&self) -> usize {
        (IMAGE_SIDE / PATCH_SIDE).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        PATCH_SIDE * PATCH_SIDE * IMAGE_CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.context_len == 0 {
            return bad("context_len must be at least 1".into());
        }
        if self.gmm_modes == 0 {
            return bad("gmm_modes must be at least 1".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("obs_hidden", self.obs_hidden),
            ("proprio_hidden", self.proprio_hidden),
            ("head_hidden", self.head_hidden),
            ("obs_dim", self.obs_dim),
            ("proprio_dim", self.proprio_dim),
            ("action_dim", self.action_dim),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.obs_encoder == ObsEncoder::PatchAttention && self.obs_dim != self.obs_encoder.obs_mode().dim() {
            return bad(format!(
                "patch-attention expects {}-value images, obs_dim is {}",
                self.obs_encoder.obs_mode().dim(),
                self.obs_dim
            ));
        }
        if self.action_scale.len() != self.action_dim || self.action_scale.iter().any(|&s| !(s > 0.0)) {
            return bad("action_scale needs one positive entry per action dimension".into());
        }
        if !(self.log_scale_bound > 0.0) {
            return bad("log_scale_bound must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        PolicyConfig::default().validate().unwrap();
        PolicyConfig::desk_scale().validate().unwrap();
        PolicyConfig::wide_scale().validate().unwrap();
        assert_eq!(PolicyConfig::default().context_len, 10);
        assert_eq!(PolicyConfig::default().gmm_modes, 5);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = PolicyConfig { num_heads: 3, ..PolicyConfig::default() };
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
    }

    #[test]
    fn rejects_zero_modes_and_context() {
        assert!(PolicyConfig { gmm_modes: 0, ..PolicyConfig::default() }.validate().is_err());
        assert!(PolicyConfig { context_len: 0, ..PolicyConfig::default() }.validate().is_err());
    }

    #[test]
    fn patch_encoder_needs_image_dim() {
        let c = PolicyConfig { obs_encoder: ObsEncoder::PatchAttention, ..PolicyConfig::default() };
        assert!(c.validate().is_err());
        let c = PolicyConfig { obs_dim: 768, ..c };
        c.validate().unwrap();
    }
}

use std::collections::BTreeMap;

use omla_autodiff::{Tape, Tensor};

use super::config::{HeadMode, ObsEncoder, PolicyConfig};
use super::mixture::MixtureTensors;
use super::params::PolicyParams;
use crate::adapters::AdapterSet;
use crate::data::Episode;
use crate::error::{CoreError, Result};
use crate::taskworld::{IMAGE_CHANNELS, IMAGE_SIDE, PATCH_SIDE};

/// Low-rank delta applied on top of one frozen linear layer.
#[derive(Debug, Clone)]
pub struct LoraBound {
    /// r × k
    pub a: Tensor,
    /// d × r
    pub b: Tensor,
    pub scaling: f64,
}

/// The concrete tensors one forward pass reads. Depending on how it was
/// built these are constants, tape leaves, or derived tape values.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    pub tensors: BTreeMap<String, Tensor>,
    pub lora: BTreeMap<String, LoraBound>,
}

impl Bound {
    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CoreError::Registry(format!("unknown weight `{name}`")))
    }

    /// `x·Wᵀ + b`, plus `scaling·(x·Aᵀ)·Bᵀ` when an adapter targets `name`.
    pub fn linear(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.get(&format!("{name}.weight"))?;
        let bias = self.get(&format!("{name}.bias"))?;
        let mut y = x.matmul_nt(w)?;
        if let Some(l) = self.lora.get(name) {
            let delta = x.matmul_nt(&l.a)?.matmul_nt(&l.b)?;
            let delta = if l.scaling == 1.0 { delta } else { delta.scale(l.scaling)? };
            y = y.add(&delta)?;
        }
        Ok(y.add_row(bias)?)
    }

    /// Per-row standardization followed by `name.gain` and `name.bias`.
    pub fn layer_norm(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let e = x.cols();
        let inv_e = 1.0 / e as f64;
        let centered = x.sub(&x.sum_axis1()?.scale(inv_e)?.expand_cols(e)?)?;
        let var = centered.square()?.sum_axis1()?.scale(inv_e)?.add_scalar(LAYER_NORM_EPS)?;
        let inv_std = var.log()?.scale(-0.5)?.exp()?;
        let gain = self.get(&format!("{name}.gain"))?.expand_rows(x.rows())?;
        Ok(centered.mul(&inv_std.expand_cols(e)?)?.mul(&gain)?.add_row(self.get(&format!("{name}.bias"))?)?)
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Step tokens and targets of one episode, computed once with a frozen base.
#[derive(Debug, Clone)]
pub struct EncodedEpisode {
    /// 1 × E description token, type embedding included.
    pub lang: Tensor,
    /// T × E observation-plus-proprio tokens, positions not yet added.
    pub steps: Tensor,
    /// T × D normalized actions.
    pub actions: Tensor,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub params: PolicyParams,
    pub(crate) attached: Option<AdapterSet>,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        let params = PolicyParams::init(&config)?;
        Ok(Self { config, params, attached: None })
    }

    pub fn from_params(config: PolicyConfig, params: PolicyParams) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params, attached: None })
    }

    /// Constants for every base weight plus the attached adapter, if any.
    pub fn bind(&self) -> Bound {
        let tensors = self.params.iter().map(|(k, p)| (k.to_string(), p.value.clone())).collect();
        let lora = self.attached.as_ref().map(AdapterSet::bound).unwrap_or_default();
        Bound { tensors, lora }
    }

    /// Every unfrozen base weight becomes a leaf on `tape`; the leaves are
    /// returned by name so gradients can be requested for them.
    pub fn bind_trainable(&self, tape: &Tape) -> (Bound, Vec<(String, Tensor)>) {
        let mut bound = self.bind();
        let mut leaves = Vec::new();
        for (name, p) in self.params.iter() {
            if !p.frozen {
                let leaf = tape.leaf(&p.value);
                bound.tensors.insert(name.to_string(), leaf.clone());
                leaves.push((name.to_string(), leaf));
            }
        }
        (bound, leaves)
    }

    /// Base constants with the given adapter tensors in place of any attached set.
    pub fn bind_with_lora(&self, lora: BTreeMap<String, LoraBound>) -> Bound {
        let tensors = self.params.iter().map(|(k, p)| (k.to_string(), p.value.clone())).collect();
        Bound { tensors, lora }
    }

    pub fn encode_language(&self, b: &Bound, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(CoreError::Contract("empty description".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(CoreError::Contract(format!("token {bad} outside vocabulary")));
        }
        let e = b.get("lang.embed")?.gather_rows(tokens)?;
        Ok(e.sum_axis0()?.scale(1.0 / tokens.len() as f64)?.add(b.get("lang.type")?)?)
    }

    /// Observation features f^O, one row per observation.
    pub fn encode_observations(&self, b: &Bound, obs: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if obs.shape().len() != 2 || obs.cols() != c.obs_dim {
            return Err(CoreError::Contract(format!(
                "observations must be n × {}, got {:?}",
                c.obs_dim,
                obs.shape()
            )));
        }
        match c.obs_encoder {
            ObsEncoder::FlatMlp => {
                let h = b.linear("obs.fc1", obs)?.tanh()?;
                b.linear("obs.fc2", &h)
            }
            ObsEncoder::PatchAttention => self.encode_patches(b, obs),
        }
    }

    fn encode_patches(&self, b: &Bound, obs: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let n = obs.rows();
        let np = c.num_patches();
        let patches = Tensor::from_vec(&[n * np, c.patch_dim()], patchify(obs.data(), n))?;
        let pos = b.get("obs.patch_pos")?;
        let pos_tiled = Tensor::concat_rows(&vec![pos; n])?;
        let tokens = b.linear("obs.patch", &patches)?.add(&pos_tiled)?;
        let keys = b.linear("obs.pool.key", &tokens)?;
        let values = b.linear("obs.pool.value", &tokens)?;
        let scores = b
            .get("obs.pool.query")?
            .matmul_nt(&keys)?
            .scale(1.0 / (c.embed_dim as f64).sqrt())?
            .reshape(&[n, np])?
            .softmax()?;
        let weighted = scores.reshape(&[n * np, 1])?.expand_cols(c.embed_dim)?.mul(&values)?;
        let pooled = group_sum(n, np).matmul(&weighted)?;
        b.linear("obs.fc", &pooled.tanh()?)
    }

    pub fn encode_proprio(&self, b: &Bound, prop: &Tensor) -> Result<Tensor> {
        let h = b.linear("prop.fc1", prop)?.tanh()?;
        b.linear("prop.fc2", &h)
    }

    pub fn step_tokens(&self, b: &Bound, obs: &Tensor, prop: &Tensor) -> Result<Tensor> {
        if obs.rows() != prop.rows() {
            return Err(CoreError::Contract("observation and proprio windows differ in length".into()));
        }
        Ok(self.encode_observations(b, obs)?.add(&self.encode_proprio(b, prop)?)?)
    }

    fn positions(&self, b: &Bound, len: usize) -> Result<Tensor> {
        let c = self.config.context_len;
        Ok(b.get("pos.embed")?.slice_rows(c - len, len)?)
    }

    /// Temporal attention over `[ACT], language, steps`, returning the
    /// mixture for each predicted step.
    pub fn decode(&self, b: &Bound, lang: &Tensor, steps: &Tensor) -> Result<MixtureTensors> {
        let c = &self.config;
        let t = steps.rows();
        if t == 0 || t > c.context_len {
            return Err(CoreError::Contract(format!(
                "window of {t} steps, context length is {}",
                c.context_len
            )));
        }
        let steps = if c.positional { steps.add(&self.positions(b, t)?)? } else { steps.clone() };
        let mut x = Tensor::concat_rows(&[b.get("act.token")?, lang, &steps])?;
        for l in 0..c.num_layers {
            x = self.block(b, l, &x, l + 1 == c.num_layers)?;
        }
        let act = x;

        let z = match c.head_mode {
            HeadMode::WindowSum => {
                let z = act.expand_rows(t)?;
                if c.positional {
                    z.add(&self.positions(b, t)?)?
                } else {
                    z
                }
            }
            HeadMode::LastStep => {
                if c.positional {
                    act.add(&self.positions(b, 1)?)?
                } else {
                    act
                }
            }
        };
        let h = b.linear("head.fc1", &b.layer_norm("head.norm", &z)?)?.relu()?;
        let out = b.linear("head.fc2", &h)?;
        let (k, d) = (c.gmm_modes, c.action_dim);
        let bound = c.log_scale_bound;
        Ok(MixtureTensors {
            logits: out.slice_cols(0, k)?,
            means: out.slice_cols(k, k * d)?,
            log_scales: out.slice_cols(k + k * d, k * d)?.scale(1.0 / bound)?.tanh()?.scale(bound)?,
            modes: k,
            action_dim: d,
        })
    }

    fn block(&self, b: &Bound, layer: usize, x: &Tensor, act_only: bool) -> Result<Tensor> {
        let c = &self.config;
        let p = |s: &str| format!("temporal.{layer}.{s}");
        let q_in = if act_only { x.slice_rows(0, 1)? } else { x.clone() };
        let xn = b.layer_norm(&p("norm1"), x)?;
        let qn = if act_only { xn.slice_rows(0, 1)? } else { xn.clone() };
        let q = b.linear(&p("attn.query"), &qn)?;
        let k = b.linear(&p("attn.key"), &xn)?;
        let v = b.linear(&p("attn.value"), &xn)?;
        let dh = c.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(c.num_heads);
        for h in 0..c.num_heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            heads.push(qh.matmul_nt(&kh)?.scale(inv)?.softmax()?.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        let attn = if refs.len() == 1 { heads[0].clone() } else { Tensor::concat_cols(&refs)? };
        let y = q_in.add(&b.linear(&p("attn.out"), &attn)?)?;
        let yn = b.layer_norm(&p("norm2"), &y)?;
        let f = b.linear(&p("ffn.fc2"), &b.linear(&p("ffn.fc1"), &yn)?.relu()?)?;
        Ok(y.add(&f)?)
    }

    /// Full forward over a raw window of observations.
    pub fn forward(&self, b: &Bound, tokens: &[usize], obs: &Tensor, prop: &Tensor) -> Result<MixtureTensors> {
        let lang = self.encode_language(b, tokens)?;
        let steps = self.step_tokens(b, obs, prop)?;
        self.decode(b, &lang, &steps)
    }

    pub fn normalize_actions(&self, actions: &Tensor) -> Result<Tensor> {
        let s: Vec<f64> = self.config.action_scale.iter().map(|v| 1.0 / v).collect();
        let n = actions.rows();
        let scale = Tensor::from_vec(&[n, s.len()], s.repeat(n))?;
        Ok(actions.mul(&scale)?)
    }

    pub fn denormalize(&self, action: &[f64]) -> Vec<f64> {
        action.iter().zip(&self.config.action_scale).map(|(a, s)| a * s).collect()
    }

    /// First row of the window that ends at `end`.
    pub fn window_start(&self, end: usize) -> usize {
        (end + 1).saturating_sub(self.config.context_len)
    }

    fn targets(&self, actions: &Tensor) -> Result<Tensor> {
        Ok(match self.config.head_mode {
            HeadMode::WindowSum => actions.clone(),
            HeadMode::LastStep => actions.slice_rows(actions.rows() - 1, 1)?,
        })
    }

    /// Loss of the window ending at `end`, read from the raw episode.
    pub fn window_loss(&self, b: &Bound, ep: &Episode, end: usize) -> Result<Tensor> {
        let start = self.window_start(end);
        let mix = self.forward(b, &ep.tokens, &ep.obs_rows(start, end)?, &ep.proprio_rows(start, end)?)?;
        let actions = self.normalize_actions(&ep.action_rows(start, end)?)?;
        mix.nll(&self.targets(&actions)?)
    }

    /// Same loss from pre-encoded steps; valid while the encoders are frozen.
    pub fn window_loss_encoded(&self, b: &Bound, enc: &EncodedEpisode, end: usize) -> Result<Tensor> {
        let start = self.window_start(end);
        let len = end + 1 - start;
        let mix = self.decode(b, &enc.lang, &enc.steps.slice_rows(start, len)?)?;
        mix.nll(&self.targets(&enc.actions.slice_rows(start, len)?)?)
    }

    /// Step tokens from the base encoders, ignoring any attached adapter.
    pub fn encode_episode(&self, ep: &Episode) -> Result<EncodedEpisode> {
        let b = self.bind_with_lora(BTreeMap::new());
        let last = ep.len() - 1;
        Ok(EncodedEpisode {
            lang: self.encode_language(&b, &ep.tokens)?,
            steps: self.step_tokens(&b, &ep.obs_rows(0, last)?, &ep.proprio_rows(0, last)?)?,
            actions: self.normalize_actions(&ep.action_rows(0, last)?)?,
        })
    }

    /// Frozen observation-encoder features for every step of `ep`.
    pub fn observation_features(&self, ep: &Episode) -> Result<Tensor> {
        let b = self.bind_with_lora(BTreeMap::new());
        self.encode_observations(&b, &ep.obs_rows(0, ep.len() - 1)?)
    }

    /// The [ACT] output for the window ending at `end`, before the head.
    pub fn act_features(&self, ep: &Episode, end: usize) -> Result<Tensor> {
        let b = self.bind();
        let start = self.window_start(end);
        let lang = self.encode_language(&b, &ep.tokens)?;
        let steps = self.step_tokens(&b, &ep.obs_rows(start, end)?, &ep.proprio_rows(start, end)?)?;
        let steps = if self.config.positional { steps.add(&self.positions(&b, end + 1 - start)?)? } else { steps };
        let mut x = Tensor::concat_rows(&[b.get("act.token")?, &lang, &steps])?;
        for l in 0..self.config.num_layers {
            x = self.block(&b, l, &x, l + 1 == self.config.num_layers)?;
        }
        Ok(x)
    }

    /// Hash of the observation encoder weights alone.
    pub fn encoder_fingerprint(&self) -> String {
        self.params.prefix_hash("obs.")
    }
}

/// Reorders channels-last images into rows of flattened 4×4 patches.
fn patchify(data: &[f64], n: usize) -> Vec<f64> {
    let per_side = IMAGE_SIDE / PATCH_SIDE;
    let img_len = IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..n {
        let img = &data[i * img_len..(i + 1) * img_len];
        for pr in 0..per_side {
            for pc in 0..per_side {
                for r in 0..PATCH_SIDE {
                    let row = pr * PATCH_SIDE + r;
                    let at = (row * IMAGE_SIDE + pc * PATCH_SIDE) * IMAGE_CHANNELS;
                    out.extend_from_slice(&img[at..at + PATCH_SIDE * IMAGE_CHANNELS]);
                }
            }
        }
    }
    out
}

fn group_sum(n: usize, group: usize) -> Tensor {
    let mut m = vec![0.0; n * n * group];
    for i in 0..n {
        for j in 0..group {
            m[i * n * group + i * group + j] = 1.0;
        }
    }
    Tensor::from_vec(&[n, n * group], m).expect("finite")
}

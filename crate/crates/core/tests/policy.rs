use std::collections::BTreeMap;

use omla_autodiff::{grad, Tape, Tensor};
use omla_core::adapters::{default_targets, init_adapters, AdapterRegistry};
use omla_core::data::{collect_demos, Episode};
use omla_core::gradcheck::{policy_loss_error, FD_STEP};
use omla_core::optim::{Adam, AdamConfig};
use omla_core::policy::{HeadMode, LoraBound, ObsEncoder, Policy, PolicyConfig, PolicyParams};
use omla_core::taskworld::{Family, TaskId, TaskSpec, Vocabulary};
use omla_core::train::{all_windows, base_step, batch_loss};
use omla_core::CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn demos(family: Family, index: usize, n: usize, encoder: ObsEncoder) -> Vec<Episode> {
    let spec = TaskSpec::new(TaskId::new(family, index));
    collect_demos(&spec, n, encoder.obs_mode(), &Vocabulary::global(), 0).unwrap()
}

fn tiny(rng: &mut ChaCha8Rng) -> PolicyConfig {
    let heads = rng.gen_range(1..=2);
    let encoder = if rng.gen_bool(0.25) { ObsEncoder::PatchAttention } else { ObsEncoder::FlatMlp };
    PolicyConfig {
        context_len: rng.gen_range(1..=3),
        embed_dim: 4 * heads,
        num_heads: heads,
        num_layers: rng.gen_range(1..=2),
        ffn_dim: rng.gen_range(2..=4),
        gmm_modes: rng.gen_range(1..=3),
        obs_encoder: encoder,
        obs_dim: encoder.obs_mode().dim(),
        obs_hidden: rng.gen_range(2..=4),
        proprio_hidden: rng.gen_range(2..=3),
        head_hidden: rng.gen_range(2..=4),
        head_mode: if rng.gen_bool(0.5) { HeadMode::WindowSum } else { HeadMode::LastStep },
        init_seed: rng.gen(),
        ..PolicyConfig::default()
    }
}

fn frozen(config: PolicyConfig) -> Policy {
    let mut p = Policy::new(config).unwrap();
    p.params.freeze_all();
    p
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn full_policy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let config = tiny(&mut rng);
        let ep = demos(Family::ALL[trial % 3], trial % 10, 1, config.obs_encoder).remove(0);
        let policy = Policy::new(config).unwrap();
        let end = rng.gen_range(0..ep.len());
        let err = policy_loss_error(&policy, &ep, end, FD_STEP).unwrap();
        assert!(err < 1e-5, "trial {trial}: {err:e} {:?}", policy.config);
    }
}

#[test]
fn single_mode_zero_head_is_standard_normal() {
    let config = PolicyConfig { gmm_modes: 1, context_len: 4, ..PolicyConfig::desk_scale() };
    let mut policy = Policy::new(config).unwrap();
    for name in ["head.fc2.weight", "head.fc2.bias"] {
        let shape = policy.params.tensor(name).unwrap().shape().to_vec();
        policy.params.set(name, Tensor::zeros(&shape)).unwrap();
    }
    let ep = demos(Family::Object, 0, 1, ObsEncoder::FlatMlp).remove(0);
    let b = policy.bind();
    let mix = policy.forward(&b, &ep.tokens, &ep.obs_rows(0, 2).unwrap(), &ep.proprio_rows(0, 2).unwrap()).unwrap();
    for row in 0..3 {
        let d = mix.step(row).unwrap();
        assert_eq!(d.weights, vec![1.0]);
        assert_eq!(d.means, vec![vec![0.0; 3]]);
        assert_eq!(d.scales, vec![vec![1.0; 3]]);
    }
}

#[test]
fn act_output_ignores_step_order_without_positions() {
    let config = PolicyConfig { positional: false, context_len: 4, ..PolicyConfig::desk_scale() };
    let policy = Policy::new(config).unwrap();
    let ep = demos(Family::Spatial, 2, 1, ObsEncoder::FlatMlp).remove(0);
    let b = policy.bind();
    let lang = policy.encode_language(&b, &ep.tokens).unwrap();
    let steps = policy.step_tokens(&b, &ep.obs_rows(3, 6).unwrap(), &ep.proprio_rows(3, 6).unwrap()).unwrap();
    let swapped = steps.gather_rows(&[0, 2, 1, 3]).unwrap();
    let a = policy.decode(&b, &lang, &steps).unwrap();
    let c = policy.decode(&b, &lang, &swapped).unwrap();
    for (x, y) in a.means.data().iter().zip(c.means.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn short_window_is_accepted_and_empty_rejected() {
    let policy = Policy::new(PolicyConfig::default()).unwrap();
    let ep = demos(Family::Goal, 0, 1, ObsEncoder::FlatMlp).remove(0);
    let b = policy.bind();
    let mix = policy.forward(&b, &ep.tokens, &ep.obs_rows(0, 2).unwrap(), &ep.proprio_rows(0, 2).unwrap()).unwrap();
    assert_eq!(mix.rows(), 3);
    let lang = policy.encode_language(&b, &ep.tokens).unwrap();
    let too_long = Tensor::zeros(&[11, 64]);
    assert!(matches!(policy.decode(&b, &lang, &too_long), Err(CoreError::Contract(_))));
    assert!(matches!(policy.encode_language(&b, &[]), Err(CoreError::Contract(_))));
}

#[test]
fn observation_encoders_share_feature_width() {
    for encoder in [ObsEncoder::FlatMlp, ObsEncoder::PatchAttention] {
        let config = PolicyConfig { obs_encoder: encoder, obs_dim: encoder.obs_mode().dim(), ..PolicyConfig::desk_scale() };
        let policy = Policy::new(config.clone()).unwrap();
        let ep = demos(Family::Object, 1, 1, encoder).remove(0);
        let f = policy.observation_features(&ep).unwrap();
        assert_eq!(f.shape(), &[ep.len(), config.embed_dim]);
        assert_eq!(bits(&f), bits(&policy.observation_features(&ep).unwrap()));
        assert!(matches!(
            policy.encode_observations(&policy.bind(), &Tensor::zeros(&[1, 7])),
            Err(CoreError::Contract(_))
        ));
    }
}

#[test]
fn zero_encoder_maps_zero_observation_to_zero() {
    for encoder in [ObsEncoder::FlatMlp, ObsEncoder::PatchAttention] {
        let config = PolicyConfig { obs_encoder: encoder, obs_dim: encoder.obs_mode().dim(), ..PolicyConfig::desk_scale() };
        let mut policy = Policy::new(config.clone()).unwrap();
        let names: Vec<String> = policy.params.names().filter(|n| n.starts_with("obs.")).map(String::from).collect();
        for n in names {
            let shape = policy.params.tensor(&n).unwrap().shape().to_vec();
            policy.params.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let f = policy.encode_observations(&policy.bind(), &Tensor::zeros(&[2, config.obs_dim])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn loss_decreases_monotonically_on_single_task_fit() {
    let config = PolicyConfig { embed_dim: 16, ffn_dim: 32, obs_hidden: 32, head_hidden: 32, ..PolicyConfig::desk_scale() };
    let mut policy = Policy::new(config).unwrap();
    let eps = demos(Family::Object, 0, 5, ObsEncoder::FlatMlp);
    let windows = all_windows(&eps);
    let mut adam = Adam::new(AdamConfig { lr: 3e-4, ..AdamConfig::default() });
    let mut prev = f64::INFINITY;
    for step in 0..200 {
        let loss = base_step(&mut policy, &mut adam, &eps, &windows).unwrap();
        assert!(loss < prev, "step {step}: {loss} after {prev}");
        prev = loss;
    }
}

#[test]
fn fresh_adapters_preserve_outputs_bit_for_bit() {
    let mut policy = frozen(PolicyConfig::desk_scale());
    let ep = demos(Family::Object, 3, 1, ObsEncoder::FlatMlp).remove(0);
    let base = policy.window_loss(&policy.bind(), &ep, 5).unwrap();
    let set = init_adapters(&policy.params, &default_targets(&policy.config), 4, 1.0, ep.task, 3).unwrap();
    policy.attach(&set).unwrap();
    let adapted = policy.window_loss(&policy.bind(), &ep, 5).unwrap();
    assert_eq!(bits(&base), bits(&adapted));
}

#[test]
fn hand_computed_adapted_output() {
    let b = omla_core::policy::Bound {
        tensors: BTreeMap::from([
            ("l.weight".to_string(), Tensor::eye(2)),
            ("l.bias".to_string(), Tensor::zeros(&[1, 2])),
        ]),
        lora: BTreeMap::from([(
            "l".to_string(),
            LoraBound { a: Tensor::matrix(&[&[0.0, 1.0]]), b: Tensor::matrix(&[&[1.0], &[0.0]]), scaling: 1.0 },
        )]),
    };
    let h = b.linear("l", &Tensor::row(&[2.0, 3.0])).unwrap();
    assert_eq!(h.to_vec(), vec![5.0, 3.0]);
}

#[test]
fn detach_and_reattach_and_swap_are_idempotent() {
    let mut policy = frozen(PolicyConfig::desk_scale());
    let ep = demos(Family::Goal, 1, 1, ObsEncoder::FlatMlp).remove(0);
    let targets = default_targets(&policy.config);
    let mut reg = AdapterRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (i, task) in [TaskId::new(Family::Goal, 5), TaskId::new(Family::Goal, 6)].into_iter().enumerate() {
        let mut set = init_adapters(&policy.params, &targets, 4, 1.0, task, i as u64).unwrap();
        for name in set.tensor_names() {
            if name.ends_with("lora_b") {
                let shape = set.pairs[name.trim_end_matches(".lora_b")].b.shape().to_vec();
                let n: usize = shape.iter().product();
                set.set_tensor(&name, Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()).unwrap())
                    .unwrap();
            }
        }
        reg.insert(set);
    }
    let a = TaskId::new(Family::Goal, 5);
    let b = TaskId::new(Family::Goal, 6);
    let out = |p: &Policy| bits(&p.window_loss(&p.bind(), &ep, 4).unwrap());

    policy.swap_task(&reg, a).unwrap();
    let first = out(&policy);
    let set = policy.detach().unwrap();
    policy.attach(&set).unwrap();
    assert_eq!(first, out(&policy));
    policy.swap_task(&reg, b).unwrap();
    assert_ne!(first, out(&policy));
    policy.swap_task(&reg, a).unwrap();
    assert_eq!(first, out(&policy));
}

#[test]
fn adapter_gradients_flow_and_base_stays_out_of_the_tape() {
    let policy = frozen(PolicyConfig::desk_scale());
    let eps = demos(Family::Object, 2, 2, ObsEncoder::FlatMlp);
    let mut set = init_adapters(&policy.params, &default_targets(&policy.config), 4, 1.0, eps[0].task, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (name, t) in set.tensors() {
        if name.ends_with("lora_b") {
            let v = (0..t.numel()).map(|_| rng.gen_range(-0.1..0.1)).collect();
            set.set_tensor(&name, Tensor::from_vec(t.shape(), v).unwrap()).unwrap();
        }
    }
    let tape = Tape::new();
    let (lora, leaves) = set.leaves(&tape);
    let bound = policy.bind_with_lora(lora);
    assert!(bound.tensors.values().all(|t| !t.requires_grad()));
    let loss = batch_loss(&policy, &bound, &eps, &all_windows(&eps)).unwrap();
    let refs: Vec<&Tensor> = leaves.iter().map(|(_, t)| t).collect();
    for ((name, _), g) in leaves.iter().zip(grad(&loss, &refs).unwrap()) {
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn adapter_ratio_at_wide_scale_is_small() {
    let config = PolicyConfig::wide_scale();
    let params = PolicyParams::init(&config).unwrap();
    let set = init_adapters(&params, &default_targets(&config), 32, 1.0, TaskId::new(Family::Object, 0), 0).unwrap();
    let ratio = set.param_count() as f64 / params.count() as f64;
    assert!(ratio < 0.05, "{ratio}");
    let closed_form: usize = default_targets(&config)
        .iter()
        .map(|t| {
            let s = params.tensor(&format!("{t}.weight")).unwrap().shape();
            32 * (s[0] + s[1])
        })
        .sum();
    assert_eq!(set.param_count(), closed_form);
}

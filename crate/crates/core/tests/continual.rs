use std::sync::OnceLock;

use omla_core::continual::{
    evaluate, export_features, pretrain, run_sequence, success_rate, EvalOptions, FeatureKind, Method, PretrainConfig,
    RunConfig, RunRecord,
};
use omla_core::data::{collect_demos, Episode};
use omla_core::metabatch::{FeatureCache, TaskData};
use omla_core::optim::AdamConfig;
use omla_core::policy::{Policy, PolicyConfig};
use omla_core::seeding;
use omla_core::taskworld::{expert_action, random_action, Family, ObsMode, TaskSpec, TaskSuite, Vocabulary};
use omla_core::CoreError;

struct Fixture {
    base: Policy,
    seen: Vec<Vec<Episode>>,
    sequence: Vec<(TaskSpec, Vec<Episode>)>,
}

fn small_config() -> PolicyConfig {
    PolicyConfig {
        embed_dim: 16,
        ffn_dim: 32,
        obs_hidden: 32,
        head_hidden: 32,
        ..PolicyConfig::desk_scale()
    }
}

fn demos(spec: &TaskSpec, n: usize, first_seed: u64) -> Vec<Episode> {
    collect_demos(spec, n, ObsMode::Flat, &Vocabulary::global(), first_seed).unwrap()
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let suite = TaskSuite::new(Family::Object);
        let seen: Vec<Vec<Episode>> = suite.pretrain_tasks()[..2].iter().map(|s| demos(s, 3, 0)).collect();
        let val: Vec<Episode> = suite.pretrain_tasks()[..2].iter().flat_map(|s| demos(s, 1, 500)).collect();
        let train: Vec<Episode> = seen.iter().flatten().cloned().collect();
        let config = PretrainConfig { max_steps: 40, eval_every: 20, batch_size: 8, ..PretrainConfig::default() };
        let base = pretrain(Policy::new(small_config()).unwrap(), &train, &val, &config).unwrap().policy;
        let sequence = suite.adapt_tasks()[..2].iter().map(|s| (s.clone(), demos(s, 3, 0))).collect();
        Fixture { base, seen, sequence }
    })
}

fn quick(method: Method) -> RunConfig {
    let mut c = RunConfig {
        method,
        demos: 3,
        finetune_steps: 8,
        batch_size: 4,
        eval_rollouts: 3,
        snapshots: 2,
        rank: 2,
        ..RunConfig::default()
    };
    c.meta.meta_steps = 2;
    c.meta.sampler.support = 2;
    c.meta.sampler.queries = 2;
    c
}

fn run(config: &RunConfig) -> omla_core::continual::RunOutcome {
    let f = fixture();
    run_sequence(&f.base, &f.seen, &f.sequence, config).unwrap()
}

fn assert_rates(record: &RunRecord) {
    for t in &record.tasks {
        for v in t.snapshots.iter().chain(&t.success).chain([&t.fwt]) {
            assert!((0.0..=1.0).contains(v), "{v}");
        }
    }
}

#[test]
fn expert_and_random_oracles() {
    for family in Family::ALL {
        for spec in TaskSuite::new(family).tasks {
            let expert = success_rate(&spec, 100, |_| |s: &omla_core::taskworld::Scene, _| expert_action(s, &spec)).unwrap();
            assert!(expert >= 0.95, "{}: expert {expert}", spec.id);
            let random = success_rate(&spec, 100, |i| {
                let mut rng = seeding::rng(i as u64, "random-policy");
                move |_: &omla_core::taskworld::Scene, _| random_action(&mut rng)
            })
            .unwrap();
            assert!(random <= 0.1, "{}: random {random}", spec.id);
        }
    }
}

#[test]
fn zero_rollouts_is_an_error() {
    let f = fixture();
    let spec = &f.sequence[0].0;
    assert!(matches!(evaluate(&f.base, spec, EvalOptions::deterministic(0)), Err(CoreError::Contract(_))));
    assert!(success_rate(spec, 0, |_| |s: &omla_core::taskworld::Scene, _| expert_action(s, spec)).is_err());
}

#[test]
fn adapter_methods_never_forget() {
    for method in [Method::Omla, Method::Lora] {
        let out = run(&quick(method));
        let r = &out.record;
        assert_rates(r);
        assert_eq!(r.tasks[0].bwt, None);
        assert_eq!(r.tasks[1].bwt, Some(0.0));
        assert_eq!(r.mean_bwt, Some(0.0));
        assert_eq!(r.tasks[1].success, vec![r.tasks[0].fwt]);
        assert_eq!(r.base_hash_before, r.base_hash_after);
        assert_eq!(r.base_hash_before, fixture().base.params.full_hash());
        assert_eq!(out.adapters.len(), 2);
    }
}

#[test]
fn meta_phase_only_runs_for_omla() {
    let omla = run(&quick(Method::Omla)).record;
    let lora = run(&quick(Method::Lora)).record;
    for t in &omla.tasks {
        assert_eq!(t.meta_steps, 2);
        assert!(t.meta_loss_first.is_some());
    }
    assert_eq!(omla.tasks[0].pool.len(), 2);
    assert_eq!(omla.tasks[1].pool.len(), 3);
    for t in &lora.tasks {
        assert_eq!(t.meta_steps, 0);
        assert!(t.pool.is_empty() && t.meta_loss_first.is_none());
    }
}

#[test]
fn pretrain_pool_scenario_keeps_the_pool_fixed() {
    let config = RunConfig { scenario: omla_core::continual::Scenario::PretrainPoolOnly, ..quick(Method::Omla) };
    let r = run(&config).record;
    let pretrain: Vec<_> = fixture().seen.iter().map(|e| e[0].task).collect();
    for t in &r.tasks {
        assert_eq!(t.pool, pretrain);
    }
}

#[test]
fn replay_changes_the_base_and_reports_backward_transfer() {
    let out = run(&quick(Method::Er));
    let r = &out.record;
    assert_rates(r);
    assert_ne!(r.base_hash_before, r.base_hash_after);
    assert_eq!(out.policy.params.full_hash(), r.base_hash_after);
    assert!(out.adapters.is_empty());
    let b = r.tasks[1].bwt.unwrap();
    assert_eq!(b, r.tasks[1].success[0] - r.tasks[0].fwt);
}

#[test]
fn no_learning_gives_zero_shot_transfer() {
    for method in Method::ALL {
        let mut config = RunConfig { finetune_steps: 0, ..quick(method) };
        config.meta.meta_steps = 0;
        let r = run(&config).record;
        for (t, (spec, _)) in r.tasks.iter().zip(&fixture().sequence) {
            let zero_shot = evaluate(&fixture().base, spec, EvalOptions::deterministic(3)).unwrap();
            assert_eq!(t.snapshot_steps, vec![0]);
            assert_eq!(t.fwt, zero_shot, "{method} {}", spec.id);
        }
    }
}

#[test]
fn same_seed_same_record() {
    for method in Method::ALL {
        let a = run(&quick(method)).record;
        let b = run(&quick(method)).record;
        assert_eq!(a, b, "{method}");
        assert_eq!(a.config_hash, quick(method).hash());
    }
}

#[test]
fn seen_dataset_accumulates() {
    let r = run(&quick(Method::Omla)).record;
    let pretrain: usize = fixture().seen.iter().map(Vec::len).sum();
    for (k, t) in r.tasks.iter().enumerate() {
        assert_eq!(t.dataset_episodes, pretrain + (k + 1) * 3);
    }
}

#[test]
fn denser_snapshots_never_lower_forward_transfer() {
    for method in [Method::Lora, Method::Omla] {
        let sparse = run(&RunConfig { snapshots: 2, ..quick(method) }).record;
        let dense = run(&RunConfig { snapshots: 4, ..quick(method) }).record;
        for (s, d) in sparse.tasks.iter().zip(&dense.tasks) {
            assert!(s.snapshot_steps.iter().all(|x| d.snapshot_steps.contains(x)));
            assert!(d.fwt >= s.fwt, "{method}: {} < {}", d.fwt, s.fwt);
        }
    }
}

#[test]
fn run_contracts() {
    let f = fixture();
    let config = quick(Method::Lora);
    assert!(matches!(run_sequence(&f.base, &f.seen, &[], &config), Err(CoreError::Contract(_))));
    let short = vec![(f.sequence[0].0.clone(), f.sequence[0].1[..2].to_vec())];
    assert!(matches!(run_sequence(&f.base, &f.seen, &short, &config), Err(CoreError::Contract(_))));
    assert!(run_sequence(&f.base, &[], &f.sequence, &quick(Method::Omla)).is_err());
    assert!(run_sequence(&f.base, &f.seen, &f.sequence, &RunConfig { demos: 0, ..config }).is_err());
}

#[test]
fn exported_features_match_the_cache() {
    let f = fixture();
    let mut frozen = f.base.clone();
    frozen.params.freeze_all();
    let episodes = &f.seen[0];
    let table = export_features(&frozen, episodes, FeatureKind::Observation).unwrap();
    assert_eq!(table.header().len(), 3 + frozen.config.embed_dim);
    assert_eq!(table.header()[..3], ["task", "episode", "step"]);
    assert_eq!(table.rows.len(), episodes.iter().map(Episode::len).sum::<usize>());
    let data = TaskData::new(&frozen, episodes[0].task, episodes.clone()).unwrap();
    let cache = FeatureCache::build(&frozen, &[&data]).unwrap();
    for row in &table.rows {
        let cached = cache.episode(row.task, row.episode).unwrap();
        let w = table.width;
        assert_eq!(row.values, cached.data()[row.step * w..(row.step + 1) * w].to_vec());
    }
    let act = export_features(&frozen, episodes, FeatureKind::Act).unwrap();
    assert_eq!(act.rows.len(), table.rows.len());
    assert!(export_features(&frozen, &[], FeatureKind::Act).unwrap().rows.is_empty());
}

#[test]
fn pretraining_stops_on_a_plateau() {
    let f = fixture();
    let train: Vec<Episode> = f.seen.iter().flatten().cloned().collect();
    let config = PretrainConfig {
        max_steps: 50,
        eval_every: 2,
        patience: 3,
        batch_size: 4,
        adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
        seed: 0,
    };
    let init = Policy::new(small_config()).unwrap();
    let out = pretrain(init.clone(), &train, &f.seen[0], &config).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.trace.last().unwrap().step, 6);
    assert_eq!(out.best_step, 0);
    assert_eq!(out.policy.params.full_hash(), init.params.full_hash());
}

#[test]
fn zero_step_pretraining_returns_the_init() {
    let f = fixture();
    let train: Vec<Episode> = f.seen.iter().flatten().cloned().collect();
    let init = Policy::new(small_config()).unwrap();
    let out = pretrain(init.clone(), &train, &f.seen[0], &PretrainConfig { max_steps: 0, ..PretrainConfig::default() }).unwrap();
    assert_eq!(out.policy.params.full_hash(), init.params.full_hash());
    assert_eq!(out.trace.len(), 1);
    assert!(!out.stopped_early);
}

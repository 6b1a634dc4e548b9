//! End-to-end acceptance: every criterion prints one PASS/FAIL line and the
//! test fails if any criterion does.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use omla_autodiff::Tensor;
use omla_core::adapters::{default_targets, init_adapters};
use omla_core::continual::{success_rate, Method, RunRecord, Scenario};
use omla_core::data::collect_demos;
use omla_core::gradcheck::{finite_differences, policy_loss_error, relative_error, FD_STEP};
use omla_core::metabatch::{find_anchor, sample_meta_batch, FeatureCache, TaskData};
use omla_core::metalearn::{batch_meta_gradient, meta_gradient, MetaConfig};
use omla_core::policy::{HeadMode, ObsEncoder, Policy, PolicyConfig};
use omla_core::seeding;
use omla_core::taskworld::{expert_action, random_action, Family, Scene, TaskId, TaskSpec, TaskSuite, Vocabulary};
use omla_core::train::Windows;
use omla_lab::pipeline::{adapt, adapt_sequence, pretrain_base, pretrain_data, PretrainData};
use omla_lab::records::{run_dir, RECORD_CSV};
use omla_lab::LabConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-5;
const META_GRAD_TOL: f64 = 1e-4;
const META_PARAM_LIMIT: usize = 50;
const GRAD_CONFIGS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const SEEDS: [u64; 3] = [0, 1, 2];
const DEMO_SIZES: [usize; 3] = [5, 10, 20];
const MAIN_DEMOS: usize = 20;
const OBJECT_MARGIN: f64 = 0.03;
const TRANSFER_BUDGET: Duration = Duration::from_secs(2 * 3600);
const ANCHOR_CASES: usize = 1000;
const EXPERT_SCENES: usize = 100;
const EXPERT_MIN: f64 = 0.95;
const RANDOM_MAX: f64 = 0.1;
/// Slack for comparing means of rates that are exact multiples of 1/20.
const EPS: f64 = 1e-12;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn verdict(id: usize, pass: bool, detail: impl Into<String>) -> Verdict {
    let v = Verdict { id, pass, detail: detail.into() };
    println!("criterion {:>2}: {}  {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v
}

fn tiny_config(rng: &mut ChaCha8Rng) -> PolicyConfig {
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

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for trial in 0..GRAD_CONFIGS {
        let config = tiny_config(&mut rng);
        let spec = TaskSpec::new(TaskId::new(Family::ALL[trial % 3], trial % 10));
        let ep = collect_demos(&spec, 1, config.obs_encoder.obs_mode(), &Vocabulary::global(), trial as u64).unwrap().remove(0);
        let end = rng.gen_range(0..ep.len());
        let policy = Policy::new(config).unwrap();
        worst = worst.max(policy_loss_error(&policy, &ep, end, FD_STEP).unwrap());
    }
    let took = start.elapsed();
    verdict(
        1,
        worst < GRAD_TOL && took < GRAD_BUDGET,
        format!("{GRAD_CONFIGS} random tiny configs, worst rel err {worst:.2e} (< {GRAD_TOL:e}), {:.1}s (< 60s)", took.as_secs_f64()),
    )
}

fn half_sq(x: &Tensor, c: f64) -> omla_core::Result<Tensor> {
    Ok(x.add_scalar(-c)?.square()?.scale(0.5)?.sum()?)
}

fn second_order_meta_gradient() -> Verdict {
    let config = PolicyConfig {
        embed_dim: 4,
        num_heads: 2,
        ffn_dim: 4,
        obs_hidden: 6,
        proprio_hidden: 3,
        head_hidden: 4,
        gmm_modes: 2,
        context_len: 3,
        ..PolicyConfig::desk_scale()
    };
    let mut policy = Policy::new(config).unwrap();
    policy.params.freeze_all();
    let task = TaskId::new(Family::Goal, 7);
    let eps = collect_demos(&TaskSpec::new(task), 3, policy.config.obs_encoder.obs_mode(), &Vocabulary::global(), 0).unwrap();
    let data = TaskData::new(&policy, task, eps).unwrap();
    let cache = FeatureCache::build(&policy, &[&data]).unwrap();
    let targets = vec!["temporal.0.attn.value".to_string(), "head.fc1".to_string()];
    let mut set = init_adapters(&policy.params, &targets, 1, 1.0, task, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (name, t) in set.tensors() {
        if name.ends_with("lora_b") {
            let v = (0..t.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            set.set_tensor(&name, Tensor::from_vec(t.shape(), v).unwrap()).unwrap();
        }
    }
    let meta = MetaConfig { inner_lr: 0.1, ..MetaConfig::default() };
    let batch = sample_meta_batch(&data, &cache, &meta.sampler, &mut rng).unwrap();
    let (_, analytic) = batch_meta_gradient(&policy, &set, &data, &batch, &meta).unwrap();
    let phi: Vec<Tensor> = set.tensors().into_iter().map(|(_, t)| t).collect();
    let windows = Windows::for_adapters(&set, &data.episodes, &data.encoded);
    let (train, val) = (batch.train_samples(), batch.val_samples());
    let numeric = finite_differences(
        |xs| {
            let (v, _) = meta_gradient(
                xs,
                meta.inner_lr,
                1,
                false,
                |p| windows.loss(&policy, &policy.bind_with_lora(set.bound_from(p)), &train),
                |p| windows.loss(&policy, &policy.bind_with_lora(set.bound_from(p)), &val),
            )?;
            Ok(v)
        },
        &phi,
        1e-5,
    )
    .unwrap();
    let a: Vec<f64> = analytic.iter().flat_map(|t| t.to_vec()).collect();
    let err = relative_error(&a, &numeric.concat());

    let (_, toy) = meta_gradient(&[Tensor::scalar(1.0)], 0.5, 1, false, |x| half_sq(&x[0], 0.0), |x| half_sq(&x[0], 2.0)).unwrap();
    let toy = toy[0].item().unwrap();
    let params = set.param_count();
    verdict(
        2,
        err < META_GRAD_TOL && params <= META_PARAM_LIMIT && toy == -0.75,
        format!("{params}-parameter adapter rel err {err:.2e} (< {META_GRAD_TOL:e}); scalar toy gradient {toy} (= -0.75)"),
    )
}

fn anchor_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut mismatches = 0;
    for case in 0..ANCHOR_CASES {
        let n = rng.gen_range(1..60);
        let d = rng.gen_range(1..12);
        let coarse = case % 2 == 0;
        let rows: Vec<Vec<f64>> = (0..=n)
            .map(|_| (0..d).map(|_| if coarse { rng.gen_range(0..3) as f64 } else { rng.gen_range(-1.0..1.0) }).collect())
            .collect();
        let (query, rows) = rows.split_last().unwrap();
        let mut best = 0;
        for (i, r) in rows.iter().enumerate() {
            let dist = |x: &Vec<f64>| x.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            if dist(r) < dist(&rows[best]) {
                best = i;
            }
        }
        let t = Tensor::from_vec(&[n, d], rows.concat()).unwrap();
        if find_anchor(query, &t).unwrap() != best {
            mismatches += 1;
        }
    }
    verdict(8, mismatches == 0, format!("{ANCHOR_CASES} random cases, {mismatches} disagreements with the exhaustive scan"))
}

fn expert_validity() -> Verdict {
    let mut worst_expert: f64 = 1.0;
    let mut worst_random: f64 = 0.0;
    for family in Family::ALL {
        for spec in TaskSuite::new(family).tasks {
            let e = success_rate(&spec, EXPERT_SCENES, |_| |s: &Scene, _| expert_action(s, &spec)).unwrap();
            let r = success_rate(&spec, EXPERT_SCENES, |i| {
                let mut rng = seeding::rng(i as u64, "random-policy");
                move |_: &Scene, _| random_action(&mut rng)
            })
            .unwrap();
            worst_expert = worst_expert.min(e);
            worst_random = worst_random.max(r);
        }
    }
    verdict(
        10,
        worst_expert >= EXPERT_MIN && worst_random <= RANDOM_MAX,
        format!("30 tasks x {EXPERT_SCENES} scenes: worst expert {worst_expert:.2} (>= 0.95), worst random {worst_random:.2} (<= 0.10)"),
    )
}

fn cli_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("lab.toml");
    std::fs::write(
        &config,
        "seeds = [7]\n[data]\npretrain_demos = 4\nadapt_tasks = 2\n[pretrain]\nmax_steps = 60\neval_every = 20\n\
         [run]\ndemos = 5\nfinetune_steps = 20\neval_rollouts = 5\nsnapshots = 2\n[run.meta]\nmeta_steps = 5\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_omla-lab");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let status = |args: &[String]| Command::new(bin).args(args).output().unwrap().status.success();
    let pre = dir.path().join("pre");
    let mut ok = status(&["pretrain".into(), "--config".into(), p(&config), "--out".into(), p(&pre)]);
    let mut csvs = Vec::new();
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        ok &= status(&[
            "adapt".into(),
            "--config".into(),
            p(&config),
            "--checkpoint".into(),
            p(&pre.join("pretrain.ckpt")),
            "--out".into(),
            p(&out),
        ]);
        let rel = run_dir(&out, Family::Object, Method::Omla, Scenario::Standard, 5, 7).join(RECORD_CSV);
        csvs.push(std::fs::read(rel).unwrap_or_default());
    }
    let same = ok && !csvs[0].is_empty() && csvs[0] == csvs[1];
    verdict(9, same, format!("two `adapt` runs, same config and seed: record CSVs of {} bytes {}", csvs[0].len(), if same { "identical" } else { "differ" }))
}

type RunKey = (Family, Method, Scenario, usize, u64);

struct Experiment {
    runs: BTreeMap<RunKey, RunRecord>,
    /// Pretraining the three bases plus the 20-demo omla and lora runs.
    transfer_time: Duration,
    bases: BTreeMap<Family, (Policy, PretrainData)>,
}

impl Experiment {
    fn run(&mut self, config: &LabConfig, key: RunKey) {
        let (family, method, scenario, demos, seed) = key;
        let (base, data) = &self.bases[&scenario.pretrain_family(family)];
        let mut lab = config.clone();
        lab.run.family = family;
        lab.run.method = method;
        lab.run.scenario = scenario;
        lab.run.demos = demos;
        let sequence = adapt_sequence(&lab, family, demos).unwrap();
        let t = Instant::now();
        let record = adapt(base, data, &sequence, &lab.run_for_seed(seed)).unwrap().record;
        println!(
            "  {family}/{method}/{scenario}/d{demos}/s{seed}: fwt {:?} mean {:.3} bwt {:?} ({:.0}s)",
            record.fwt(),
            record.mean_fwt,
            record.mean_bwt,
            t.elapsed().as_secs_f64()
        );
        self.runs.insert(key, record);
    }

    fn mean_fwt(&self, family: Family, method: Method, scenario: Scenario, demos: usize) -> f64 {
        SEEDS.iter().map(|&s| self.runs[&(family, method, scenario, demos, s)].mean_fwt).sum::<f64>() / SEEDS.len() as f64
    }
}

fn experiment() -> Experiment {
    let config = LabConfig::default();
    let start = Instant::now();
    let mut exp = Experiment { runs: BTreeMap::new(), transfer_time: Duration::ZERO, bases: BTreeMap::new() };
    for family in Family::ALL {
        let data = pretrain_data(&config, family).unwrap();
        let mut lab = config.clone();
        lab.run.family = family;
        let out = pretrain_base(&lab, &data).unwrap();
        println!("  pretrained {family} base: best step {} ({:.0}s)", out.best_step, start.elapsed().as_secs_f64());
        exp.bases.insert(family, (out.policy, data));
    }
    for family in Family::ALL {
        for method in [Method::Omla, Method::Lora] {
            for seed in SEEDS {
                exp.run(&config, (family, method, Scenario::Standard, MAIN_DEMOS, seed));
            }
        }
    }
    exp.transfer_time = start.elapsed();
    for family in Family::ALL {
        for method in [Method::Omla, Method::Lora] {
            for demos in DEMO_SIZES.into_iter().filter(|&d| d != MAIN_DEMOS) {
                for seed in SEEDS {
                    exp.run(&config, (family, method, Scenario::Standard, demos, seed));
                }
            }
        }
    }
    for scenario in [Scenario::MismatchedPretrain, Scenario::PretrainPoolOnly] {
        for seed in SEEDS {
            exp.run(&config, (Family::Object, Method::Omla, scenario, MAIN_DEMOS, seed));
        }
    }
    for seed in SEEDS {
        exp.run(&config, (Family::Object, Method::Er, Scenario::Standard, MAIN_DEMOS, seed));
    }
    println!("  experiment took {:.0}s", start.elapsed().as_secs_f64());
    exp
}

fn lora_identity_and_freeze(exp: &Experiment) -> Verdict {
    let (base, data) = &exp.bases[&Family::Object];
    let mut frozen = base.clone();
    frozen.params.freeze_all();
    let ep = &data.seen[0][0];
    let before: Vec<u64> = frozen.window_loss(&frozen.bind(), ep, 3).unwrap().data().iter().map(|v| v.to_bits()).collect();
    let set = init_adapters(&frozen.params, &default_targets(&frozen.config), 8, 1.0, ep.task, 11).unwrap();
    frozen.attach(&set).unwrap();
    let after: Vec<u64> = frozen.window_loss(&frozen.bind(), ep, 3).unwrap().data().iter().map(|v| v.to_bits()).collect();
    let identity = before == after;
    let (mut kept, mut adapter_runs, mut changed, mut er_runs) = (0, 0, 0, 0);
    for ((_, method, ..), r) in &exp.runs {
        if method.uses_adapters() {
            adapter_runs += 1;
            kept += (r.base_hash_before == r.base_hash_after) as usize;
        } else {
            er_runs += 1;
            changed += (r.base_hash_before != r.base_hash_after) as usize;
        }
    }
    verdict(
        3,
        identity && kept == adapter_runs && changed == er_runs && er_runs > 0,
        format!(
            "fresh adapters bit-identical: {identity}; base hash kept in {kept}/{adapter_runs} adapter runs, changed in {changed}/{er_runs} er runs"
        ),
    )
}

fn no_forgetting(exp: &Experiment) -> Verdict {
    let mut exact = 0;
    let mut adapter_runs = 0;
    for ((_, method, ..), r) in &exp.runs {
        if method.uses_adapters() {
            adapter_runs += 1;
            let all_zero = r.tasks.iter().skip(1).all(|t| t.bwt == Some(0.0)) && r.mean_bwt == Some(0.0);
            exact += all_zero as usize;
        }
    }
    let er: Vec<f64> = SEEDS
        .iter()
        .map(|&s| exp.runs[&(Family::Object, Method::Er, Scenario::Standard, MAIN_DEMOS, s)].mean_bwt.unwrap())
        .collect();
    let er_mean = er.iter().sum::<f64>() / er.len() as f64;
    verdict(
        4,
        exact == adapter_runs && er_mean <= EPS,
        format!("BWT exactly 0 in {exact}/{adapter_runs} omla/lora runs; er object BWT per seed {er:.3?}, mean {er_mean:.3} (<= 0)"),
    )
}

fn forward_transfer(exp: &Experiment) -> Verdict {
    let mut pass = exp.transfer_time <= TRANSFER_BUDGET;
    let mut parts = Vec::new();
    for family in Family::ALL {
        let o = exp.mean_fwt(family, Method::Omla, Scenario::Standard, MAIN_DEMOS);
        let l = exp.mean_fwt(family, Method::Lora, Scenario::Standard, MAIN_DEMOS);
        let need = if family == Family::Object { OBJECT_MARGIN } else { 0.0 };
        pass &= o - l >= need - EPS;
        parts.push(format!("{family} omla {o:.3} lora {l:.3} (margin {:+.3}, need {need:.2})", o - l));
    }
    verdict(5, pass, format!("{}; {:.0} min (<= 120)", parts.join("; "), exp.transfer_time.as_secs_f64() / 60.0))
}

fn dataset_size_trend(exp: &Experiment) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for family in Family::ALL {
        let m = |method| DEMO_SIZES.map(|d| exp.mean_fwt(family, method, Scenario::Standard, d));
        let (o, l) = (m(Method::Omla), m(Method::Lora));
        let monotone = |v: &[f64; 3]| v.windows(2).all(|w| w[1] >= w[0] - EPS);
        pass &= monotone(&o) && monotone(&l) && o.iter().zip(&l).all(|(a, b)| a >= &(b - EPS));
        parts.push(format!("{family} omla {o:.3?} lora {l:.3?}"));
    }
    verdict(6, pass, format!("demos {DEMO_SIZES:?}: {}", parts.join("; ")))
}

fn scenario_ordering(exp: &Experiment) -> Verdict {
    let f = |m, s| exp.mean_fwt(Family::Object, m, s, MAIN_DEMOS);
    let omla = f(Method::Omla, Scenario::Standard);
    let s1 = f(Method::Omla, Scenario::MismatchedPretrain);
    let s2 = f(Method::Omla, Scenario::PretrainPoolOnly);
    let lora = f(Method::Lora, Scenario::Standard);
    let ge = |a: f64, b: f64| a >= b - EPS;
    verdict(
        7,
        ge(omla, s2) && ge(s2, lora) && ge(omla, s1) && ge(s1, lora),
        format!("object: omla {omla:.3}, s2 {s2:.3}, s1 {s1:.3}, lora {lora:.3}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = vec![gradient_integrity(), second_order_meta_gradient(), anchor_oracle(), expert_validity(), cli_determinism()];
    let exp = experiment();
    verdicts.push(lora_identity_and_freeze(&exp));
    verdicts.push(no_forgetting(&exp));
    verdicts.push(forward_transfer(&exp));
    verdicts.push(dataset_size_trend(&exp));
    verdicts.push(scenario_ordering(&exp));
    verdicts.sort_by_key(|v| v.id);

    println!("\nacceptance summary");
    for v in &verdicts {
        println!("criterion {:>2}: {}  {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

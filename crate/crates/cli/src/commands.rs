use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use omla_core::continual::{evaluate, export_features, success_rate, EvalOptions, FeatureKind, Method, Scenario};
use omla_core::data::collect_demos;
use omla_core::taskworld::{expert_action, Family, ObsMode, TaskId, TaskSpec, TaskSuite, Vocabulary};

use crate::binio::write_file;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{sha256_hex, LabConfig};
use crate::episodes::{EpisodeFile, EPISODE_EXT};
use crate::error::{LabError, Result};
use crate::pipeline::{adapt, adapt_sequence, pretrain_base, pretrain_data};
use crate::records::{run_dir, write_run, RunFile};
use crate::report::{aggregate, collect_records, report_csv, report_text};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const LOG_FILE: &str = "lab.log";

/// Scenes per task when printing expert success.
const EXPERT_CHECK_SCENES: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "omla-lab", version, about = "Continual adaptation experiments with meta-learned LoRA adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record expert demonstrations into episode files.
    GenDemos(GenDemosArgs),
    /// Behavior-clone the base policy on a family's pretraining tasks.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained base to the family's task sequence, once per seed.
    Adapt(AdaptArgs),
    /// Average run records over seeds into a table.
    Report(ReportArgs),
    /// Dump per-step features of episodes as CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObsArg {
    Flat,
    Image,
}

#[derive(Debug, Args)]
pub struct GenDemosArgs {
    #[arg(long)]
    pub suite: Family,
    /// `all`, `pretrain`, `adapt`, or comma-separated one-based indices.
    #[arg(long, default_value = "all")]
    pub tasks: String,
    #[arg(long, default_value_t = 20)]
    pub demos: usize,
    /// First demonstration seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "flat")]
    pub obs: ObsArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub demos: Option<usize>,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Observation,
    Act,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An episode file, or a directory of them.
    #[arg(long)]
    pub episodes: PathBuf,
    #[arg(long, value_enum, default_value = "observation")]
    pub kind: KindArg,
    /// Adapter checkpoint whose set for the episodes' task is attached first.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Lines go to stdout and to `<out>/lab.log`.
pub struct Log {
    file: File,
}

impl Log {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let file = File::options().create(true).append(true).open(&path).map_err(|e| LabError::io(&path, e))?;
        Ok(Self { file })
    }

    pub fn line(&mut self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        println!("{msg}");
        let _ = writeln!(self.file, "{msg}");
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos(a) => gen_demos(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Adapt(a) => adapt_cmd(&a),
        Command::Report(a) => report(&a),
        Command::ExportFeatures(a) => export(&a),
    }
}

pub fn parse_task_selection(family: Family, sel: &str) -> Result<Vec<TaskSpec>> {
    let suite = TaskSuite::new(family);
    match sel {
        "all" => Ok(suite.tasks.clone()),
        "pretrain" => Ok(suite.pretrain_tasks().to_vec()),
        "adapt" => Ok(suite.adapt_tasks().to_vec()),
        list => list
            .split(',')
            .map(|s| {
                let i: usize = s.trim().parse().map_err(|_| LabError::Config(format!("bad task index `{s}`")))?;
                if i == 0 || i > suite.tasks.len() {
                    return Err(LabError::Config(format!("task index {i} outside 1..={}", suite.tasks.len())));
                }
                Ok(suite.tasks[i - 1].clone())
            })
            .collect(),
    }
}

fn resolve_out(flag: &Option<PathBuf>, config: &LabConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| config.out.clone())
        .ok_or_else(|| LabError::Config("no output directory: pass --out or set `out`".into()))
}

fn log_config(log: &mut Log, out: &Path, config: &LabConfig) -> Result<()> {
    let resolved = config.resolved();
    write_file(&out.join("config.toml"), resolved.as_bytes())?;
    log.line(format!("config hash {}", config.hash()));
    for l in resolved.lines() {
        log.line(format!("  {l}"));
    }
    Ok(())
}

fn gen_demos(a: &GenDemosArgs) -> Result<()> {
    let mode = match a.obs {
        ObsArg::Flat => ObsMode::Flat,
        ObsArg::Image => ObsMode::Image,
    };
    if a.demos == 0 {
        return Err(LabError::Config("--demos must be at least 1".into()));
    }
    let specs = parse_task_selection(a.suite, &a.tasks)?;
    let canonical = format!("gen-demos suite={} tasks={} demos={} seed={} obs={mode:?}", a.suite, a.tasks, a.demos, a.seed);
    let hash = sha256_hex(canonical.as_bytes());
    let mut log = Log::open(&a.out)?;
    log.line(format!("{canonical} hash {hash}"));
    for spec in &specs {
        let episodes = collect_demos(spec, a.demos, mode, &Vocabulary::global(), a.seed)?;
        let path = EpisodeFile::new(spec, episodes, &hash)?.save(&a.out)?;
        let expert = success_rate(spec, EXPERT_CHECK_SCENES, |_| |s: &_, _| expert_action(s, spec))?;
        log.line(format!("{} demos {} expert success {expert:.2} -> {}", spec.id, a.demos, path.display()));
    }
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let config = LabConfig::load(&a.config)?;
    let out = resolve_out(&a.out, &config)?;
    let mut log = Log::open(&out)?;
    log_config(&mut log, &out, &config)?;
    let family = config.pretrain_family();
    let data = pretrain_data(&config, family)?;
    log.line(format!("pretraining on {} {family} tasks, {} episodes", data.seen.len(), data.train().len()));
    let outcome = pretrain_base(&config, &data)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "train", "val"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in &outcome.trace {
        w.write_record([p.step.to_string(), opt(p.train), opt(p.val)])?;
    }
    write_file(&out.join("loss.csv"), &w.into_inner().expect("in-memory writer"))?;

    let mut ckpt = Checkpoint::from_policy(&outcome.policy, family, &config.hash());
    ckpt.rngs.push(RngState::capture("pretrain", &outcome.rng));
    ckpt.save(&out.join(PRETRAIN_CHECKPOINT))?;
    let last = outcome.trace.last().map_or(0, |p| p.step);
    log.line(format!(
        "best step {} val {:.5}, stopped {} at step {last}",
        outcome.best_step,
        outcome.best_val,
        if outcome.stopped_early { "on plateau" } else { "at budget" }
    ));
    let opts = EvalOptions::deterministic(config.run.eval_rollouts);
    for spec in TaskSuite::new(family).pretrain_tasks() {
        log.line(format!("{} success {:.3}", spec.id, evaluate(&outcome.policy, spec, opts)?));
    }
    Ok(())
}

fn adapt_cmd(a: &AdaptArgs) -> Result<()> {
    let mut config = LabConfig::load(&a.config)?;
    if let Some(m) = a.method {
        config.run.method = m;
    }
    if let Some(s) = a.scenario {
        config.run.scenario = s;
    }
    if let Some(d) = a.demos {
        config.run.demos = d;
    }
    if let Some(s) = &a.seeds {
        config.seeds = s.clone();
    }
    config.validate()?;
    let out = resolve_out(&a.out, &config)?;
    let mut log = Log::open(&out)?;
    log_config(&mut log, &out, &config)?;

    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if ckpt.policy != config.policy {
        return Err(LabError::mismatch(&a.checkpoint, "policy config differs from the adapt config"));
    }
    let family = config.pretrain_family();
    if ckpt.family != family {
        return Err(LabError::mismatch(
            &a.checkpoint,
            format!("base was pretrained on {}, scenario {} needs {family}", ckpt.family, config.run.scenario),
        ));
    }
    let base = ckpt.to_policy()?;
    let data = pretrain_data(&config, family)?;
    let run = &config.run;
    let sequence = adapt_sequence(&config, run.family, run.demos)?;
    log.line(format!(
        "method {} scenario {} family {} demos {} checkpoint {} (config {})",
        run.method,
        run.scenario,
        run.family,
        run.demos,
        a.checkpoint.display(),
        ckpt.config_hash
    ));
    for &seed in &config.seeds {
        let rc = config.run_for_seed(seed);
        let outcome = adapt(&base, &data, &sequence, &rc)?;
        let r = &outcome.record;
        for t in &r.tasks {
            let pool: Vec<String> = t.pool.iter().map(TaskId::to_string).collect();
            log.line(format!(
                "seed {seed} {} meta steps {} pool [{}] fwt {:.3} bwt {}",
                t.task,
                t.meta_steps,
                pool.join(","),
                t.fwt,
                t.bwt.map_or("-".into(), |b| format!("{b:.3}"))
            ));
        }
        log.line(format!(
            "seed {seed} mean fwt {:.4} mean bwt {}",
            r.mean_fwt,
            r.mean_bwt.map_or("-".into(), |b| format!("{b:.4}"))
        ));
        let dir = run_dir(&out, r.family, r.method, r.scenario, r.demos, seed);
        write_run(
            &dir,
            &RunFile { lab_config_hash: config.hash(), checkpoint_config_hash: ckpt.config_hash.clone(), record: r.clone() },
        )?;
        if run.method.uses_adapters() {
            for set in outcome.adapters.iter() {
                let one = Checkpoint::adapters_only(&config.policy, family, &config.hash(), vec![set.clone()]);
                one.save(&dir.join("adapters").join(format!("{}.ckpt", set.task)))?;
            }
        } else {
            Checkpoint::from_policy(&outcome.policy, family, &config.hash()).save(&dir.join("policy.ckpt"))?;
        }
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let records = collect_records(&a.runs)?;
    let cells = aggregate(&records)?;
    write_file(&a.out.join("report.csv"), &report_csv(&cells)?)?;
    let text = report_text(&cells);
    write_file(&a.out.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn episode_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| LabError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == EPISODE_EXT))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(LabError::Missing { path: path.to_path_buf(), reason: "no episode files".into() });
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn export(a: &ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut base = ckpt.to_policy()?;
    base.params.freeze_all();
    let adapters = a.adapters.as_deref().map(Checkpoint::load).transpose()?;
    let kind = match a.kind {
        KindArg::Observation => FeatureKind::Observation,
        KindArg::Act => FeatureKind::Act,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header_written = false;
    let mut rows = 0;
    for path in episode_files(&a.episodes)? {
        let file = EpisodeFile::load(&path)?;
        let width = file.episodes[0].observations[0].len();
        if width != base.config.obs_dim {
            return Err(LabError::mismatch(&path, format!("observation width {width}, policy expects {}", base.config.obs_dim)));
        }
        let mut policy = base.clone();
        if let Some(ad) = &adapters {
            let set = ad
                .adapter(file.task)
                .ok_or_else(|| LabError::mismatch(&path, format!("no adapters for {}", file.task)))?;
            policy.attach(set)?;
        }
        let table = export_features(&policy, &file.episodes, kind)?;
        if !header_written {
            w.write_record(table.header())?;
            header_written = true;
        }
        for r in &table.rows {
            let mut rec = vec![r.task.to_string(), r.episode.to_string(), r.step.to_string()];
            rec.extend(r.values.iter().map(f64::to_string));
            w.write_record(rec)?;
        }
        rows += table.rows.len();
    }
    let name = format!("features-{}.csv", if kind == FeatureKind::Act { "act" } else { "observation" });
    let path = a.out.join(name);
    write_file(&path, &w.into_inner().expect("in-memory writer"))?;
    println!("{rows} rows -> {}", path.display());
    Ok(())
}


//! On-disk forms of a run: a per-task CSV and a JSON document.

use std::path::{Path, PathBuf};

use omla_core::continual::{Method, RunRecord, Scenario};
use omla_core::taskworld::Family;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file};
use crate::error::{LabError, Result};

pub const RECORD_CSV: &str = "record.csv";
pub const RECORD_JSON: &str = "record.json";

/// CSV columns, one row per adapted task.
pub const RECORD_COLUMNS: [&str; 18] = [
    "method",
    "scenario",
    "family",
    "demos",
    "seed",
    "task",
    "fwt",
    "bwt",
    "best_snapshot",
    "snapshot_steps",
    "snapshots",
    "success",
    "meta_steps",
    "meta_loss_first",
    "meta_loss_last",
    "pool",
    "dataset_episodes",
    "config_hash",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub lab_config_hash: String,
    pub checkpoint_config_hash: String,
    pub record: RunRecord,
}

/// `<family>-<method>-<scenario>-d<demos>/seed-<seed>`
pub fn run_dir(root: &Path, family: Family, method: Method, scenario: Scenario, demos: usize, seed: u64) -> PathBuf {
    root.join(format!("{family}-{method}-{scenario}-d{demos}")).join(format!("seed-{seed}"))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn record_csv(record: &RunRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RECORD_COLUMNS)?;
    for t in &record.tasks {
        w.write_record([
            record.method.to_string(),
            record.scenario.to_string(),
            record.family.to_string(),
            record.demos.to_string(),
            record.seed.to_string(),
            t.task.to_string(),
            t.fwt.to_string(),
            opt(t.bwt),
            t.best_snapshot.to_string(),
            join(&t.snapshot_steps),
            join(&t.snapshots),
            join(&t.success),
            t.meta_steps.to_string(),
            opt(t.meta_loss_first),
            opt(t.meta_loss_last),
            join(&t.pool),
            t.dataset_episodes.to_string(),
            record.config_hash.clone(),
        ])?;
    }
    w.into_inner().map_err(|e| LabError::Io { path: PathBuf::from("record.csv"), source: e.into_error() })
}

pub fn write_run(dir: &Path, file: &RunFile) -> Result<()> {
    write_file(&dir.join(RECORD_CSV), &record_csv(&file.record)?)?;
    write_file(&dir.join(RECORD_JSON), (serde_json::to_string_pretty(file)? + "\n").as_bytes())
}

pub fn read_run(path: &Path) -> Result<RunFile> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| LabError::corrupt(path, e.to_string()))
}

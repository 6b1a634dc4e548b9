//! Mean tables over seeds, one cell per method × scenario × family × demos.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use omla_core::continual::{Method, RunRecord, Scenario};
use omla_core::taskworld::Family;
use walkdir::WalkDir;

use crate::error::{LabError, Result};
use crate::records::{read_run, RECORD_JSON};

/// Report columns in output order.
pub const REPORT_COLUMNS: [&str; 8] = ["family", "demos", "method", "scenario", "seeds", "mean_fwt", "mean_bwt", "status"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub family: Family,
    pub demos: usize,
    pub method: Method,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub key: CellKey,
    pub seeds: Vec<u64>,
    pub missing: Vec<u64>,
    /// Absent when a seed is missing.
    pub mean_fwt: Option<f64>,
    pub mean_bwt: Option<f64>,
}

impl Cell {
    pub fn status(&self) -> String {
        if self.missing.is_empty() {
            "ok".into()
        } else {
            format!("missing seed {}", self.missing.iter().map(u64::to_string).collect::<Vec<_>>().join(","))
        }
    }

    fn fields(&self) -> [String; 8] {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        [
            self.key.family.to_string(),
            self.key.demos.to_string(),
            self.key.method.to_string(),
            self.key.scenario.to_string(),
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
            f(self.mean_fwt),
            f(self.mean_bwt),
            self.status(),
        ]
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups records into cells. The expected seed set is every seed seen
/// across all records; a cell lacking any of them carries no means.
pub fn aggregate(records: &[RunRecord]) -> Result<Vec<Cell>> {
    let expected: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    let mut groups: BTreeMap<CellKey, BTreeMap<u64, &RunRecord>> = BTreeMap::new();
    for r in records {
        let key = CellKey { family: r.family, demos: r.demos, method: r.method, scenario: r.scenario };
        if groups.entry(key).or_default().insert(r.seed, r).is_some() {
            return Err(LabError::Config(format!("duplicate record for {key:?} seed {}", r.seed)));
        }
    }
    Ok(groups
        .into_iter()
        .map(|(key, runs)| {
            let missing: Vec<u64> = expected.iter().filter(|s| !runs.contains_key(s)).copied().collect();
            let complete = missing.is_empty();
            Cell {
                key,
                seeds: runs.keys().copied().collect(),
                mean_fwt: if complete { mean(runs.values().map(|r| r.mean_fwt)) } else { None },
                mean_bwt: if complete { mean(runs.values().filter_map(|r| r.mean_bwt)) } else { None },
                missing,
            }
        })
        .collect())
}

/// Every `record.json` below `dir`, in path order.
pub fn collect_records(dir: &Path) -> Result<Vec<RunRecord>> {
    if !dir.is_dir() {
        return Err(LabError::Missing { path: dir.to_path_buf(), reason: "not a directory".into() });
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| LabError::corrupt(dir, e.to_string()))?;
        if entry.file_type().is_file() && entry.file_name() == RECORD_JSON {
            out.push(read_run(entry.path())?.record);
        }
    }
    if out.is_empty() {
        return Err(LabError::Missing { path: dir.to_path_buf(), reason: format!("no {RECORD_JSON} files") });
    }
    Ok(out)
}

pub fn report_csv(cells: &[Cell]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    for c in cells {
        w.write_record(c.fields())?;
    }
    Ok(w.into_inner().expect("in-memory writer"))
}

/// Whitespace-aligned rendering of the same table.
pub fn report_text(cells: &[Cell]) -> String {
    let rows: Vec<[String; 8]> = std::iter::once(REPORT_COLUMNS.map(String::from)).chain(cells.iter().map(Cell::fields)).collect();
    let widths: Vec<usize> = (0..8).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: Method, seed: u64, fwt: f64) -> RunRecord {
        RunRecord {
            method,
            scenario: Scenario::Standard,
            family: Family::Object,
            demos: 20,
            seed,
            config_hash: String::new(),
            tasks: Vec::new(),
            mean_fwt: fwt,
            mean_bwt: Some(0.0),
            base_hash_before: String::new(),
            base_hash_after: String::new(),
        }
    }

    #[test]
    fn cells_average_over_seeds() {
        let recs = [0.2, 0.4, 0.9].iter().enumerate().map(|(s, &f)| record(Method::Omla, s as u64, f)).collect::<Vec<_>>();
        let cells = aggregate(&recs).unwrap();
        assert_eq!(cells.len(), 1);
        assert!((cells[0].mean_fwt.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(cells[0].status(), "ok");
    }

    #[test]
    fn missing_seeds_are_flagged_not_averaged() {
        let recs = vec![record(Method::Omla, 0, 0.5), record(Method::Omla, 1, 0.7), record(Method::Lora, 0, 0.1)];
        let cells = aggregate(&recs).unwrap();
        let lora = cells.iter().find(|c| c.key.method == Method::Lora).unwrap();
        assert_eq!(lora.missing, vec![1]);
        assert_eq!(lora.mean_fwt, None);
        assert_eq!(lora.status(), "missing seed 1");
        let text = report_text(&cells);
        assert!(text.lines().next().unwrap().starts_with("family"));
        let csv = String::from_utf8(report_csv(&cells).unwrap()).unwrap();
        assert_eq!(csv.lines().next().unwrap(), REPORT_COLUMNS.join(","));
        assert!(csv.contains("object,20,lora,standard,0,,,missing seed 1\n"));
    }

    #[test]
    fn duplicates_are_rejected() {
        assert!(aggregate(&[record(Method::Er, 0, 0.1), record(Method::Er, 0, 0.2)]).is_err());
    }

    #[test]
    fn rows_follow_the_fixed_order() {
        let recs = vec![record(Method::Er, 0, 0.1), record(Method::Lora, 0, 0.1), record(Method::Omla, 0, 0.1)];
        let order: Vec<Method> = aggregate(&recs).unwrap().iter().map(|c| c.key.method).collect();
        assert_eq!(order, vec![Method::Omla, Method::Lora, Method::Er]);
    }
}

//! One binary file per task holding every demonstration, plus a JSON
//! sidecar index.
//!
//! Binary layout (little-endian): magic, version `u32`, producing config
//! hash, task id, description, observation/proprio/action widths, the
//! description tokens, then per episode its seed, step count and one
//! `obs ‖ proprio ‖ action` record of f64 per step.

use std::path::{Path, PathBuf};

use omla_core::data::Episode;
use omla_core::taskworld::{TaskId, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::config::sha256_hex;
use crate::error::{LabError, Result};

pub const EPISODE_MAGIC: &[u8; 8] = b"OMLAEPIS";
pub const EPISODE_VERSION: u32 = 1;
pub const EPISODE_EXT: &str = "omep";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub seed: u64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeIndex {
    pub format_version: u32,
    pub config_hash: String,
    pub suite: String,
    pub task: String,
    pub description: String,
    pub obs_dim: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    pub file: String,
    pub sha256: String,
    pub episodes: Vec<EpisodeEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFile {
    pub config_hash: String,
    pub task: TaskId,
    pub description: String,
    pub episodes: Vec<Episode>,
}

pub fn episode_path(dir: &Path, task: TaskId) -> PathBuf {
    dir.join(format!("{task}.{EPISODE_EXT}"))
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn dims(episodes: &[Episode]) -> (usize, usize, usize) {
    episodes.first().map_or((0, 0, 0), |e| (e.observations[0].len(), e.proprio[0].len(), e.actions[0].len()))
}

impl EpisodeFile {
    pub fn new(spec: &TaskSpec, episodes: Vec<Episode>, config_hash: &str) -> Result<Self> {
        if episodes.is_empty() {
            return Err(LabError::Config(format!("no episodes for {}", spec.id)));
        }
        let (o, p, a) = dims(&episodes);
        for e in &episodes {
            e.validate()?;
            let ragged = e.observations.iter().any(|r| r.len() != o)
                || e.proprio.iter().any(|r| r.len() != p)
                || e.actions.iter().any(|r| r.len() != a);
            if e.task != spec.id || e.tokens != episodes[0].tokens || ragged {
                return Err(LabError::Config(format!("episodes of {} are not uniform", spec.id)));
            }
        }
        Ok(Self { config_hash: config_hash.into(), task: spec.id, description: spec.description.clone(), episodes })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (o, p, a) = dims(&self.episodes);
        let mut w = Writer::default();
        w.bytes(EPISODE_MAGIC);
        w.u32(EPISODE_VERSION);
        w.str(&self.config_hash);
        w.str(&self.task.to_string());
        w.str(&self.description);
        for d in [o, p, a] {
            w.len(d);
        }
        let tokens = &self.episodes[0].tokens;
        w.len(tokens.len());
        for &t in tokens {
            w.u32(t as u32);
        }
        w.len(self.episodes.len());
        for e in &self.episodes {
            w.u64(e.seed);
            w.len(e.len());
            for t in 0..e.len() {
                w.f64s(&e.observations[t]);
                w.f64s(&e.proprio[t]);
                w.f64s(&e.actions[t]);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.expect_magic(EPISODE_MAGIC)?;
        let version = r.u32()?;
        if version != EPISODE_VERSION {
            return Err(LabError::corrupt(path, format!("unsupported episode file version {version}")));
        }
        let config_hash = r.str()?;
        let task: TaskId = r.str()?.parse().map_err(|e| r.corrupt(format!("{e}")))?;
        let description = r.str()?;
        let (o, p, a) = (r.len()?, r.len()?, r.len()?);
        let n_tokens = r.len()?;
        let tokens = (0..n_tokens).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let count = r.len()?;
        let mut episodes = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let seed = r.u64()?;
            let steps = r.len()?;
            let mut e = Episode {
                task,
                seed,
                tokens: tokens.clone(),
                observations: Vec::with_capacity(steps.min(4096)),
                proprio: Vec::with_capacity(steps.min(4096)),
                actions: Vec::with_capacity(steps.min(4096)),
            };
            for _ in 0..steps {
                e.observations.push(r.f64s(o)?);
                e.proprio.push(r.f64s(p)?);
                e.actions.push(r.f64s(a)?);
            }
            e.validate().map_err(|err| r.corrupt(err.to_string()))?;
            episodes.push(e);
        }
        r.finish()?;
        if episodes.is_empty() {
            return Err(LabError::corrupt(path, "file holds no episodes"));
        }
        Ok(Self { config_hash, task, description, episodes })
    }

    pub fn index(&self, file_name: &str, bytes: &[u8]) -> EpisodeIndex {
        let (obs_dim, proprio_dim, action_dim) = dims(&self.episodes);
        EpisodeIndex {
            format_version: EPISODE_VERSION,
            config_hash: self.config_hash.clone(),
            suite: self.task.family.name().into(),
            task: self.task.to_string(),
            description: self.description.clone(),
            obs_dim,
            proprio_dim,
            action_dim,
            file: file_name.into(),
            sha256: sha256_hex(bytes),
            episodes: self.episodes.iter().map(|e| EpisodeEntry { seed: e.seed, steps: e.len() }).collect(),
        }
    }

    /// Writes `<dir>/<task>.omep` and its `.json` sidecar; returns the binary path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = episode_path(dir, self.task);
        let bytes = self.to_bytes();
        write_file(&path, &bytes)?;
        let name = path.file_name().expect("file name").to_string_lossy().into_owned();
        let index = serde_json::to_string_pretty(&self.index(&name, &bytes))? + "\n";
        write_file(&sidecar(&path), index.as_bytes())?;
        Ok(path)
    }

    /// Loads a binary file and checks it against its sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let side = sidecar(path);
        let index: EpisodeIndex = serde_json::from_slice(&read_file(&side)?)
            .map_err(|e| LabError::corrupt(&side, e.to_string()))?;
        if index.sha256 != sha256_hex(&bytes) {
            return Err(LabError::mismatch(path, "checksum differs from the sidecar index"));
        }
        let file = Self::from_bytes(&bytes, path)?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if file.index(&name, &bytes) != index {
            return Err(LabError::mismatch(path, "contents disagree with the sidecar index"));
        }
        Ok(file)
    }

    /// Loads `<dir>/<task>.omep`, requiring the task's current description
    /// and at least `min` episodes.
    pub fn load_task(dir: &Path, spec: &TaskSpec, min: usize) -> Result<Vec<Episode>> {
        let path = episode_path(dir, spec.id);
        let file = Self::load(&path)?;
        if file.task != spec.id || file.description != spec.description {
            return Err(LabError::mismatch(&path, format!("holds `{}`, expected {}", file.description, spec.id)));
        }
        if file.episodes.len() < min {
            return Err(LabError::mismatch(&path, format!("{} episodes, {min} needed", file.episodes.len())));
        }
        Ok(file.episodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use omla_core::data::collect_demos;
    use omla_core::taskworld::{Family, ObsMode, Vocabulary};

    fn sample() -> EpisodeFile {
        let spec = TaskSpec::new(TaskId::new(Family::Spatial, 2));
        let eps = collect_demos(&spec, 3, ObsMode::Flat, &Vocabulary::global(), 0).unwrap();
        EpisodeFile::new(&spec, eps, "h").unwrap()
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let f = sample();
        let bytes = f.to_bytes();
        let back = EpisodeFile::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn files_and_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let f = sample();
        let path = f.save(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), "spatial-3.omep");
        let index: EpisodeIndex = serde_json::from_slice(&std::fs::read(path.with_extension("json")).unwrap()).unwrap();
        assert_eq!(index.episodes.len(), 3);
        assert_eq!(index.obs_dim, f.episodes[0].observations[0].len());
        assert_eq!(EpisodeFile::load(&path).unwrap(), f);
        let spec = TaskSpec::new(f.task);
        assert_eq!(EpisodeFile::load_task(dir.path(), &spec, 3).unwrap().len(), 3);
        assert_eq!(EpisodeFile::load_task(dir.path(), &spec, 4).unwrap_err().exit_code(), 2);
        let other = TaskSpec::new(TaskId::new(Family::Spatial, 3));
        assert_eq!(EpisodeFile::load_task(dir.path(), &other, 1).unwrap_err().exit_code(), 4);

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(EpisodeFile::load(&path), Err(LabError::Mismatch { .. })));
    }

    #[test]
    fn mixed_tasks_are_rejected() {
        let f = sample();
        let spec = TaskSpec::new(TaskId::new(Family::Spatial, 4));
        assert!(EpisodeFile::new(&spec, f.episodes, "h").is_err());
    }
}

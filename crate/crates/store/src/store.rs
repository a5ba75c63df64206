//! The on-disk store.
//!
//! ```text
//! <root>/runs/<run_id>/run.json        RunRecord
//! <root>/runs/<run_id>/config.toml     config snapshot (hashed into run.json)
//! <root>/runs/<run_id>/artifacts/      anything the run produced
//! <root>/sessions/<session_id>/events.jsonl
//! <root>/reports/<report_id>.json
//! <root>/configs/<name>.toml           named configs that POST /runs can launch
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Duo,
    Orchestra,
    Baseline,
    Forge,
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub kind: RunKind,
    pub created_at: DateTime<Utc>,
    pub status: RunStatus,
    /// Session ids whose event logs belong to this run.
    #[serde(default)]
    pub transcript_refs: Vec<String>,
    /// Relative to the store root.
    pub artifact_dir: String,
    /// Name of the config the run was launched from, when it had one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    /// Hex SHA-256 of `config.toml`.
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("invalid id `{0}`")]
    InvalidId(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Ids become path components, so only a conservative alphabet is allowed.
pub fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 200
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Writes through a temporary file and a rename, so readers never see half a file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["runs", "sessions", "reports", "configs"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn session_dir(&self, session_id: &str) -> PathBuf {
        self.root.join("sessions").join(session_id)
    }

    /// A fresh record for `config_bytes`; nothing is written yet.
    pub fn new_run(&self, kind: RunKind, config_bytes: &[u8], created_at: DateTime<Utc>) -> RunRecord {
        let run_id =
            format!("{}-{}", created_at.format("%Y%m%dT%H%M%S"), &uuid::Uuid::new_v4().simple().to_string()[..8]);
        RunRecord {
            artifact_dir: format!("runs/{run_id}/artifacts"),
            run_id,
            kind,
            created_at,
            status: RunStatus::Queued,
            transcript_refs: Vec::new(),
            config_name: None,
            problem: None,
            config_hash: sha256_hex(config_bytes),
            message: None,
        }
    }

    /// Persists the record and its config snapshot. The record's hash must match the bytes.
    pub fn save_run(&self, record: &RunRecord, config_bytes: &[u8]) -> Result<(), StoreError> {
        check_id(&record.run_id)?;
        if record.config_hash != sha256_hex(config_bytes) {
            return Err(StoreError::Corrupt(format!(
                "run {}: config hash does not match the config bytes",
                record.run_id
            )));
        }
        let dir = self.run_dir(&record.run_id);
        let artifacts = self.root.join(&record.artifact_dir);
        fs::create_dir_all(&artifacts).map_err(io_err(&artifacts))?;
        write_atomic(&dir.join("config.toml"), config_bytes)?;
        self.update_run(record)
    }

    /// Rewrites `run.json` only (status and refs change; the config does not).
    pub fn update_run(&self, record: &RunRecord) -> Result<(), StoreError> {
        check_id(&record.run_id)?;
        let bytes = serde_json::to_vec_pretty(record).expect("record serializes");
        write_atomic(&self.run_dir(&record.run_id).join("run.json"), &bytes)
    }

    /// Loads a run and its config, verifying the config hash.
    pub fn load_run(&self, run_id: &str) -> Result<(RunRecord, Vec<u8>), StoreError> {
        check_id(run_id)?;
        let dir = self.run_dir(run_id);
        let run_path = dir.join("run.json");
        let bytes = match fs::read(&run_path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(format!("run {run_id}"))),
            Err(e) => return Err(StoreError::Io { path: run_path, source: e }),
        };
        let record: RunRecord =
            serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(format!("run {run_id}: {e}")))?;
        let cfg_path = dir.join("config.toml");
        let config = fs::read(&cfg_path).map_err(|e| StoreError::Corrupt(format!("run {run_id}: config: {e}")))?;
        if sha256_hex(&config) != record.config_hash {
            return Err(StoreError::Corrupt(format!("run {run_id}: config hash mismatch")));
        }
        Ok((record, config))
    }

    /// Every run, oldest first. Unreadable runs are skipped with a warning.
    pub fn list_runs(&self) -> Result<Vec<RunRecord>, StoreError> {
        let dir = self.root.join("runs");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let id = entry.file_name().to_string_lossy().to_string();
            match self.load_run(&id) {
                Ok((r, _)) => out.push(r),
                Err(e) => log::warn!("skipping run {id}: {e}"),
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.run_id.cmp(&b.run_id)));
        Ok(out)
    }

    pub fn save_report(&self, report_id: &str, report: &serde_json::Value) -> Result<(), StoreError> {
        check_id(report_id)?;
        let bytes = serde_json::to_vec_pretty(report).expect("json serializes");
        write_atomic(&self.root.join("reports").join(format!("{report_id}.json")), &bytes)
    }

    pub fn load_report(&self, report_id: &str) -> Result<serde_json::Value, StoreError> {
        check_id(report_id)?;
        let path = self.root.join("reports").join(format!("{report_id}.json"));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(format!("report {report_id}")))
            }
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt(format!("report {report_id}: {e}")))
    }

    pub fn save_config(&self, name: &str, text: &str) -> Result<(), StoreError> {
        check_id(name)?;
        write_atomic(&self.root.join("configs").join(format!("{name}.toml")), text.as_bytes())
    }

    pub fn load_config(&self, name: &str) -> Result<Vec<u8>, StoreError> {
        check_id(name)?;
        let path = self.root.join("configs").join(format!("{name}.toml"));
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound(format!("config {name}")),
            _ => StoreError::Io { path, source: e },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids() {
        assert!(check_id("fm_q11-duo.1").is_ok());
        for bad in ["", "..", "a/b", ".hidden", "a b"] {
            assert!(check_id(bad).is_err(), "{bad}");
        }
    }
}

//! Run ledger: one JSON line per (framework, problem).

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use femagent_core::chat::CodeBlock;
use femagent_core::sandbox::ExecutionReport;
use serde::{Deserialize, Serialize};

use crate::grade::Verdict;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub framework_id: String,
    pub problem_id: String,
    /// Strategy-specific terminal status (e.g. `executed-clean`, `terminated-by-admin`).
    pub status: String,
    pub executable: bool,
    pub final_code: Option<CodeBlock>,
    pub final_report: Option<ExecutionReport>,
    /// Transcript files, relative to the transcripts directory.
    #[serde(default)]
    pub transcript_refs: Vec<String>,
    /// Scalars parsed from the final stdout.
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub verdict: Verdict,
}

impl LedgerEntry {
    pub fn key(&self) -> (String, String) {
        (self.framework_id.clone(), self.problem_id.clone())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
}

/// All entries keyed by (framework_id, problem_id); at most one per key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLedger {
    entries: BTreeMap<(String, String), LedgerEntry>,
}

impl RunLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces; returns the entry it replaced.
    pub fn insert(&mut self, entry: LedgerEntry) -> Option<LedgerEntry> {
        self.entries.insert(entry.key(), entry)
    }

    pub fn get(&self, framework_id: &str, problem_id: &str) -> Option<&LedgerEntry> {
        self.entries.get(&(framework_id.to_string(), problem_id.to_string()))
    }

    pub fn contains(&self, framework_id: &str, problem_id: &str) -> bool {
        self.get(framework_id, problem_id).is_some()
    }

    pub fn entries(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.values()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut LedgerEntry> {
        self.entries.values_mut()
    }

    pub fn for_framework<'a>(&'a self, framework_id: &'a str) -> impl Iterator<Item = &'a LedgerEntry> + 'a {
        self.entries.values().filter(move |e| e.framework_id == framework_id)
    }

    pub fn frameworks(&self) -> Vec<String> {
        let mut v: Vec<String> = self.entries.keys().map(|(f, _)| f.clone()).collect();
        v.dedup();
        v
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a JSON Lines ledger. Later lines replace earlier ones with the same key,
    /// and a torn final line (from an interrupted write) is dropped.
    pub fn load(path: &Path) -> Result<Self, LedgerError> {
        let io_err = |source| LedgerError::Io { path: path.into(), source };
        let file = File::open(path).map_err(io_err)?;
        let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>().map_err(io_err)?;
        let mut ledger = Self::new();
        let last = lines.iter().rposition(|l| !l.trim().is_empty());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LedgerEntry>(line) {
                Ok(e) => {
                    ledger.insert(e);
                }
                Err(e) if Some(i) == last && e.is_eof() => log::warn!("{}: dropping torn last line", path.display()),
                Err(source) => return Err(LedgerError::Parse { path: path.into(), line: i + 1, source }),
            }
        }
        Ok(ledger)
    }

    /// Loads `path` if it exists, else an empty ledger.
    pub fn load_or_default(path: &Path) -> Result<Self, LedgerError> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }

    /// Rewrites the whole ledger atomically (temp file plus rename).
    pub fn save(&self, path: &Path) -> Result<(), LedgerError> {
        let io_err = |source| LedgerError::Io { path: path.into(), source };
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
            for e in self.entries.values() {
                writeln!(w, "{}", serde_json::to_string(e).expect("entry serializes")).map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        fs::rename(&tmp, path).map_err(io_err)
    }

    /// Appends one entry to the file and flushes it.
    pub fn append(path: &Path, entry: &LedgerEntry) -> Result<(), LedgerError> {
        let io_err = |source| LedgerError::Io { path: path.into(), source };
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        writeln!(f, "{}", serde_json::to_string(entry).expect("entry serializes")).map_err(io_err)?;
        f.flush().map_err(io_err)
    }
}

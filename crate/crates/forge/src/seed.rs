//! Seed corpus ingestion.
//!
//! Files are JSON arrays of objects or JSON Lines. Each object needs string
//! `instruction`, `input` and `output` fields; an optional `physics` (or
//! `physics_tag`) field overrides keyword classification.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::record::AlpacaRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhysicsTag {
    Solid,
    Fluid,
    Multiphysics,
    Heat,
    Fundamentals,
    Other,
}

impl PhysicsTag {
    pub const ALL: [PhysicsTag; 6] = [
        PhysicsTag::Solid,
        PhysicsTag::Fluid,
        PhysicsTag::Multiphysics,
        PhysicsTag::Heat,
        PhysicsTag::Fundamentals,
        PhysicsTag::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhysicsTag::Solid => "solid",
            PhysicsTag::Fluid => "fluid",
            PhysicsTag::Multiphysics => "multiphysics",
            PhysicsTag::Heat => "heat",
            PhysicsTag::Fundamentals => "fundamentals",
            PhysicsTag::Other => "other",
        }
    }

    /// Keyword guess from free text. Coupling words win over single-physics words.
    pub fn classify(text: &str) -> PhysicsTag {
        let t = text.to_lowercase();
        let has = |words: &[&str]| words.iter().any(|w| t.contains(w));
        if has(&[
            "multiphysics",
            "coupled",
            "thermoelastic",
            "thermo-mechanical",
            "fluid-structure",
            "poroelastic",
            "phase-field",
            "electro",
        ]) {
            PhysicsTag::Multiphysics
        } else if has(&["navier", "stokes", "flow", "fluid", "velocity", "darcy", "reynolds"]) {
            PhysicsTag::Fluid
        } else if has(&["elastic", "plastic", "stress", "strain", "displacement", "beam", "hyperelastic"]) {
            PhysicsTag::Solid
        } else if has(&["heat", "temperature", "thermal"]) {
            PhysicsTag::Heat
        } else if has(&["poisson", "mesh", "laplace", "function space", "variational", "assemble", "helmholtz"]) {
            PhysicsTag::Fundamentals
        } else {
            PhysicsTag::Other
        }
    }
}

impl fmt::Display for PhysicsTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhysicsTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown physics tag `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEntry {
    /// Position in the corpus after deduplication; stable for a fixed file list.
    pub id: usize,
    pub instruction: String,
    pub input: String,
    pub output: String,
    /// File stem the entry came from.
    pub source_tag: String,
    pub physics_tag: PhysicsTag,
}

impl SeedEntry {
    pub fn to_record(&self) -> AlpacaRecord {
        AlpacaRecord::new(&self.instruction, &self.input, &self.output)
    }

    /// The text retrieval scores against.
    pub fn retrieval_text(&self) -> String {
        if self.input.is_empty() {
            self.instruction.clone()
        } else {
            format!("{}\n{}", self.instruction, self.input)
        }
    }
}

/// A record that was skipped; ingestion carries on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedRecord {
    pub file: PathBuf,
    /// 1-based record position within the file.
    pub record: usize,
    pub reason: String,
}

/// A record whose program text matched an earlier entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicateWarning {
    pub file: PathBuf,
    pub record: usize,
    pub duplicate_of: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SeedCorpus {
    pub entries: Vec<SeedEntry>,
    pub malformed: Vec<MalformedRecord>,
    pub duplicates: Vec<DuplicateWarning>,
}

impl SeedCorpus {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&SeedEntry> {
        self.entries.get(id)
    }

    pub fn census(&self) -> Vec<(PhysicsTag, usize)> {
        PhysicsTag::ALL.into_iter().map(|t| (t, self.entries.iter().filter(|e| e.physics_tag == t).count())).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SeedError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} is not a JSON array of records: {reason}")]
    NotArray { path: PathBuf, reason: String },
}

/// Program text with trailing whitespace and blank lines removed, for duplicate detection.
pub fn normalize_program(text: &str) -> String {
    text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("\n")
}

fn field(obj: &serde_json::Map<String, Value>, name: &str) -> Result<String, String> {
    match obj.get(name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("field `{name}` is not a string")),
        None => Err(format!("missing field `{name}`")),
    }
}

fn parse_record(v: &Value, source_tag: &str) -> Result<SeedEntry, String> {
    let obj = v.as_object().ok_or("record is not an object")?;
    let instruction = field(obj, "instruction")?;
    let input = field(obj, "input")?;
    let output = field(obj, "output")?;
    if output.trim().is_empty() {
        return Err("field `output` is empty".into());
    }
    let tag = obj.get("physics").or_else(|| obj.get("physics_tag")).and_then(Value::as_str);
    let physics_tag = match tag {
        Some(t) => t.parse()?,
        None => PhysicsTag::classify(&format!("{instruction}\n{input}")),
    };
    Ok(SeedEntry { id: 0, instruction, input, output, source_tag: source_tag.to_string(), physics_tag })
}

/// Loads the files in order. Entry ids follow file order then record order.
pub fn ingest_seed<P: AsRef<Path>>(paths: &[P]) -> Result<SeedCorpus, SeedError> {
    let mut corpus = SeedCorpus::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for path in paths {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SeedError::Io { path: path.into(), source })?;
        let source_tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("seed").to_string();
        let records: Vec<Result<Value, String>> = if text.trim_start().starts_with('[') {
            let all: Vec<Value> = serde_json::from_str(&text)
                .map_err(|e| SeedError::NotArray { path: path.into(), reason: e.to_string() })?;
            all.into_iter().map(Ok).collect()
        } else {
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| format!("invalid JSON: {e}")))
                .collect()
        };
        for (i, rec) in records.into_iter().enumerate() {
            let parsed = rec.and_then(|v| parse_record(&v, &source_tag));
            let mut entry = match parsed {
                Ok(e) => e,
                Err(reason) => {
                    log::warn!("{}: record {}: {reason}", path.display(), i + 1);
                    corpus.malformed.push(MalformedRecord { file: path.into(), record: i + 1, reason });
                    continue;
                }
            };
            let key = normalize_program(&entry.output);
            if let Some(&first) = seen.get(&key) {
                log::warn!("{}: record {} duplicates seed entry {first}", path.display(), i + 1);
                corpus.duplicates.push(DuplicateWarning { file: path.into(), record: i + 1, duplicate_of: first });
                continue;
            }
            entry.id = corpus.entries.len();
            seen.insert(key, entry.id);
            corpus.entries.push(entry);
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_prefers_coupling() {
        assert_eq!(PhysicsTag::classify("coupled thermoelastic plate"), PhysicsTag::Multiphysics);
        assert_eq!(PhysicsTag::classify("Stokes flow in a channel"), PhysicsTag::Fluid);
        assert_eq!(PhysicsTag::classify("cantilever beam deflection"), PhysicsTag::Solid);
        assert_eq!(PhysicsTag::classify("transient heat equation"), PhysicsTag::Heat);
        assert_eq!(PhysicsTag::classify("solve Poisson on a mesh"), PhysicsTag::Fundamentals);
        assert_eq!(PhysicsTag::classify("hello"), PhysicsTag::Other);
    }

    #[test]
    fn normalization_ignores_trailing_space_and_blank_lines() {
        assert_eq!(normalize_program("a = 1  \r\n\n\nprint(a)\n"), normalize_program("a = 1\nprint(a)"));
        assert_ne!(normalize_program("a = 1"), normalize_program("a  = 1"));
    }
}

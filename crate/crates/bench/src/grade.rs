//! Grading: executable status, optional scalar comparison, manual verdicts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ledger::{LedgerEntry, RunLedger};
use crate::scalars::normalize_name;

pub const DEFAULT_REL_TOL: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    Yes,
    No,
    Ungraded,
}

impl fmt::Display for Correctness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Correctness::Yes => "yes",
            Correctness::No => "no",
            Correctness::Ungraded => "ungraded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictSource {
    Manual,
    AutoComparator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub problem_id: String,
    pub executable: bool,
    pub correct: Correctness,
    pub verdict_source: Option<VerdictSource>,
    #[serde(default)]
    pub notes: String,
    #[serde(default)]
    pub grader_id: Option<String>,
}

impl Verdict {
    pub fn ungraded(problem_id: impl Into<String>, executable: bool) -> Self {
        Self {
            problem_id: problem_id.into(),
            executable,
            correct: Correctness::Ungraded,
            verdict_source: None,
            notes: String::new(),
            grader_id: None,
        }
    }

    /// A correct verdict requires code that executed.
    pub fn is_consistent(&self) -> bool {
        self.correct != Correctness::Yes || self.executable
    }
}

/// A human judgement recorded for one problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManualVerdict {
    pub problem_id: String,
    /// Restricts the verdict to one framework; applies to all when absent.
    #[serde(default)]
    pub framework_id: Option<String>,
    pub correct: bool,
    pub grader_id: String,
    #[serde(default)]
    pub notes: String,
    /// Re-confirmed after a disagreement with the comparator.
    #[serde(default)]
    pub confirmed: bool,
}

/// Reference scalars per problem id.
pub type References = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, thiserror::Error)]
pub enum GradeError {
    #[error("{problem_id}: manual verdict `{manual}` disagrees with the comparator (`{auto}`: {auto_notes}); re-confirm it to resolve")]
    Conflict { problem_id: String, manual: Correctness, auto: Correctness, auto_notes: String },
    #[error("{path}: {reason}")]
    Input { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub correct: bool,
    pub notes: String,
}

/// Decides correctness from an entry and reference data. Pluggable so field-level
/// comparison can be added later.
pub trait Comparator: Send + Sync {
    fn compare(&self, entry: &LedgerEntry, reference: &BTreeMap<String, f64>) -> Comparison;
}

/// Relative error on each reference scalar; zero references use absolute error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarComparator {
    pub rel_tol: f64,
}

impl Default for ScalarComparator {
    fn default() -> Self {
        Self { rel_tol: DEFAULT_REL_TOL }
    }
}

impl ScalarComparator {
    pub fn error(produced: f64, reference: f64) -> f64 {
        if reference == 0.0 {
            produced.abs()
        } else {
            (produced - reference).abs() / reference.abs()
        }
    }
}

impl Comparator for ScalarComparator {
    fn compare(&self, entry: &LedgerEntry, reference: &BTreeMap<String, f64>) -> Comparison {
        let mut notes = Vec::new();
        let mut correct = true;
        for (name, &want) in reference {
            match entry.scalars.get(&normalize_name(name)) {
                None => {
                    correct = false;
                    notes.push(format!("{name}: not reported"));
                }
                Some(&got) => {
                    let err = Self::error(got, want);
                    let ok = err <= self.rel_tol;
                    correct &= ok;
                    notes.push(format!(
                        "{name}: {got} vs {want} (error {err:.3e}{})",
                        if ok { "" } else { ", over tolerance" }
                    ));
                }
            }
        }
        Comparison { correct, notes: notes.join("; ") }
    }
}

fn yes_no(b: bool) -> Correctness {
    if b {
        Correctness::Yes
    } else {
        Correctness::No
    }
}

/// Grades one entry.
///
/// Non-executable code is incorrect outright. Otherwise the comparator runs when a
/// reference is supplied, and a manual verdict is used when present. If both exist
/// and disagree, the manual verdict wins only once it is marked confirmed.
pub fn grade(
    entry: &LedgerEntry,
    reference: Option<&BTreeMap<String, f64>>,
    manual: Option<&ManualVerdict>,
    comparator: &dyn Comparator,
) -> Result<Verdict, GradeError> {
    let mut v = Verdict::ungraded(entry.problem_id.clone(), entry.executable);
    if !entry.executable {
        v.correct = Correctness::No;
        v.verdict_source = Some(VerdictSource::AutoComparator);
        v.notes = "code did not execute".into();
        if let Some(m) = manual {
            v.grader_id = Some(m.grader_id.clone());
        }
        return Ok(v);
    }
    let auto = reference.filter(|r| !r.is_empty()).map(|r| comparator.compare(entry, r));
    match (manual, auto) {
        (Some(m), auto) => {
            if let Some(a) = &auto {
                if a.correct != m.correct && !m.confirmed {
                    return Err(GradeError::Conflict {
                        problem_id: entry.problem_id.clone(),
                        manual: yes_no(m.correct),
                        auto: yes_no(a.correct),
                        auto_notes: a.notes.clone(),
                    });
                }
            }
            v.correct = yes_no(m.correct);
            v.verdict_source = Some(VerdictSource::Manual);
            v.notes = m.notes.clone();
            v.grader_id = Some(m.grader_id.clone());
        }
        (None, Some(a)) => {
            v.correct = yes_no(a.correct);
            v.verdict_source = Some(VerdictSource::AutoComparator);
            v.notes = a.notes;
        }
        (None, None) => {}
    }
    Ok(v)
}

/// Result of grading a whole ledger.
#[derive(Debug, Clone, Default)]
pub struct GradeSummary {
    pub graded: usize,
    pub ungraded: Vec<String>,
    /// Entries left untouched because manual and auto verdicts disagree.
    pub conflicts: Vec<String>,
}

/// Regrades every entry in place. Conflicting entries keep their previous verdict.
pub fn grade_ledger(
    ledger: &mut RunLedger,
    references: &References,
    manual: &[ManualVerdict],
    comparator: &dyn Comparator,
) -> GradeSummary {
    let mut summary = GradeSummary::default();
    for entry in ledger.entries_mut() {
        // a framework-specific verdict takes precedence over a generic one
        let m = manual
            .iter()
            .filter(|m| m.problem_id == entry.problem_id)
            .filter(|m| m.framework_id.as_deref().is_none_or(|f| f == entry.framework_id))
            .max_by_key(|m| m.framework_id.is_some());
        match grade(entry, references.get(&entry.problem_id), m, comparator) {
            Ok(v) => {
                if v.correct == Correctness::Ungraded {
                    summary.ungraded.push(format!("{}/{}", entry.framework_id, entry.problem_id));
                } else {
                    summary.graded += 1;
                }
                entry.verdict = v;
            }
            Err(e) => summary.conflicts.push(format!("{}: {e}", entry.framework_id)),
        }
    }
    summary
}

/// Reads `[problem_id]` tables of `scalar = value` pairs.
pub fn load_references(path: &Path) -> Result<References, GradeError> {
    let err = |reason: String| GradeError::Input { path: path.into(), reason };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    toml::from_str(&text).map_err(|e| err(e.to_string()))
}

/// Reads manual verdicts from JSON Lines.
pub fn load_manual_verdicts(path: &Path) -> Result<Vec<ManualVerdict>, GradeError> {
    let err = |reason: String| GradeError::Input { path: path.into(), reason };
    let f = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

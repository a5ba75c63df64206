//! Problem statements from files or a registry.

use std::path::Path;

use anyhow::{Context, Result};
use femagent_bench::registry::parse_problem;
use femagent_bench::ProblemSpec;

/// A prompt and a short id used for session names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
}

impl From<&ProblemSpec> for Problem {
    fn from(p: &ProblemSpec) -> Self {
        Self { id: p.id.clone(), prompt: p.prompt.clone() }
    }
}

/// Reads a registry problem file (`.toml`) or, for any other file, takes the
/// whole text as the prompt and the file stem as the id.
pub fn load_problem(path: &Path) -> Result<Problem> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        let spec = parse_problem(path, &text)?;
        return Ok(Problem::from(&spec));
    }
    let id = path.file_stem().map_or_else(|| "problem".into(), |s| s.to_string_lossy().into_owned());
    Ok(Problem { id, prompt: text.trim().to_string() })
}

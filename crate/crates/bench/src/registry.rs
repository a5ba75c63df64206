//! The problem registry: one TOML file per problem.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use femagent_core::sandbox::ArtifactKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Physics {
    Solid,
    Fluid,
    Multiphysics,
}

impl Physics {
    pub const ALL: [Physics; 3] = [Physics::Solid, Physics::Fluid, Physics::Multiphysics];

    pub fn name(self) -> &'static str {
        match self {
            Physics::Solid => "solid",
            Physics::Fluid => "fluid",
            Physics::Multiphysics => "multiphysics",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Physics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Physics {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|p| p.name() == s.trim()).ok_or_else(|| format!("unknown physics class `{s}`"))
    }
}

impl FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|d| d.name() == s.trim()).ok_or_else(|| format!("unknown difficulty `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedArtifact {
    pub pattern: String,
    pub kind: ArtifactKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportedScalar {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub physics: Physics,
    pub difficulty: Difficulty,
    pub prompt: String,
    #[serde(default)]
    pub expected_artifacts: Vec<ExpectedArtifact>,
    #[serde(default)]
    pub reported_scalars: Vec<ReportedScalar>,
}

/// Census of the shipped registry.
pub const EXPECTED_TOTAL: usize = 39;
pub const EXPECTED_PHYSICS: [(Physics, usize); 3] =
    [(Physics::Solid, 16), (Physics::Fluid, 15), (Physics::Multiphysics, 8)];
pub const EXPECTED_DIFFICULTY: [(Difficulty, usize); 3] =
    [(Difficulty::Easy, 13), (Difficulty::Medium, 13), (Difficulty::Hard, 13)];

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("duplicate problem id `{0}`")]
    DuplicateId(String),
    #[error("census mismatch: {0}")]
    CensusMismatch(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    problems: Vec<ProblemSpec>,
}

/// Orders `fm_q2` before `fm_q10`: text prefix, then the trailing number.
pub fn id_order(a: &str, b: &str) -> std::cmp::Ordering {
    let split = |s: &str| {
        let digits = s.chars().rev().take_while(char::is_ascii_digit).count();
        let (head, tail) = s.split_at(s.len() - digits);
        (head.to_string(), tail.parse::<u64>().unwrap_or(0))
    };
    split(a).cmp(&split(b)).then_with(|| a.cmp(b))
}

impl Registry {
    pub fn new(mut problems: Vec<ProblemSpec>) -> Result<Self, RegistryError> {
        let mut seen = HashSet::new();
        for p in &problems {
            if !seen.insert(p.id.clone()) {
                return Err(RegistryError::DuplicateId(p.id.clone()));
            }
        }
        problems.sort_by(|a, b| id_order(&a.id, &b.id));
        Ok(Self { problems })
    }

    pub fn problems(&self) -> &[ProblemSpec] {
        &self.problems
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ProblemSpec> {
        self.problems.iter().find(|p| p.id == id)
    }

    pub fn by_physics(&self) -> BTreeMap<Physics, usize> {
        let mut m = BTreeMap::new();
        for p in &self.problems {
            *m.entry(p.physics).or_insert(0) += 1;
        }
        m
    }

    pub fn by_difficulty(&self) -> BTreeMap<Difficulty, usize> {
        let mut m = BTreeMap::new();
        for p in &self.problems {
            *m.entry(p.difficulty).or_insert(0) += 1;
        }
        m
    }

    /// Compares the census with the shipped 39-problem set.
    pub fn check_census(&self) -> Result<(), RegistryError> {
        let mut problems = Vec::new();
        if self.len() != EXPECTED_TOTAL {
            problems.push(format!("{} problems (expected {EXPECTED_TOTAL})", self.len()));
        }
        let phys = self.by_physics();
        for (p, n) in EXPECTED_PHYSICS {
            let got = phys.get(&p).copied().unwrap_or(0);
            if got != n {
                problems.push(format!("{got} {p} (expected {n})"));
            }
        }
        let diff = self.by_difficulty();
        for (d, n) in EXPECTED_DIFFICULTY {
            let got = diff.get(&d).copied().unwrap_or(0);
            if got != n {
                problems.push(format!("{got} {d} (expected {n})"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RegistryError::CensusMismatch(problems.join(", ")))
        }
    }
}

pub fn parse_problem(path: &Path, text: &str) -> Result<ProblemSpec, RegistryError> {
    let spec: ProblemSpec =
        toml::from_str(text).map_err(|e| RegistryError::Parse { path: path.into(), reason: e.to_string() })?;
    if spec.id.trim().is_empty() || spec.prompt.trim().is_empty() {
        return Err(RegistryError::Parse { path: path.into(), reason: "id and prompt must be non-empty".into() });
    }
    Ok(spec)
}

/// Every `*.toml` file in `dir`, without the census check. For custom or partial registries.
pub fn load_registry_unchecked(dir: &Path) -> Result<Registry, RegistryError> {
    let io = |source| RegistryError::Io { path: dir.into(), source };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    let mut problems = Vec::with_capacity(paths.len());
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|source| RegistryError::Io { path: path.clone(), source })?;
        problems.push(parse_problem(&path, &text)?);
    }
    Registry::new(problems)
}

/// Loads the full registry and insists on the 39-problem census.
pub fn load_registry(dir: &Path) -> Result<Registry, RegistryError> {
    let r = load_registry_unchecked(dir)?;
    r.check_census()?;
    Ok(r)
}

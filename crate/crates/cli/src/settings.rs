//! `femagent.toml`: named endpoints, the sandbox, and per-command defaults.
//!
//! ```toml
//! [endpoints.local]
//! base_url = "http://127.0.0.1:8000/v1"
//! model_name = "fenics-coder"
//!
//! [sandbox]
//! wall_timeout = 600
//!
//! [duo]
//! endpoint = "local"
//!
//! [orchestra]
//! default_endpoint = "local"
//!
//! [bench]
//! registry = "registry"
//! strategy = "orchestra"
//! ```
//!
//! Every section is optional. Relative paths inside `[endpoints.*]` (reply
//! scripts) resolve against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use femagent_core::duo::DuoLimits;
use femagent_core::gateway::{parse_endpoint_configs, EndpointRegistry, DEFAULT_INFLIGHT_PER_HOST};
use femagent_core::orchestra::RosterConfig;
use femagent_core::sandbox::SandboxConfig;
use femagent_forge::PipelineConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Duo,
    Orchestra,
    Baseline,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Duo => "duo",
            StrategyKind::Orchestra => "orchestra",
            StrategyKind::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuoSection {
    pub endpoint: Option<String>,
    pub limits: DuoLimits,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub registry: PathBuf,
    pub strategy: StrategyKind,
    /// Endpoint for duo and baseline runs; orchestra runs use `[orchestra]`.
    pub endpoint: Option<String>,
    pub ledger: PathBuf,
    pub transcripts: PathBuf,
    pub parallelism: usize,
    pub references: Option<PathBuf>,
    pub verdicts: Option<PathBuf>,
    pub rel_tol: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            registry: PathBuf::from("registry"),
            strategy: StrategyKind::Orchestra,
            endpoint: None,
            ledger: PathBuf::from("bench/ledger.jsonl"),
            transcripts: PathBuf::from("bench/transcripts"),
            parallelism: 4,
            references: None,
            verdicts: None,
            rel_tol: femagent_bench::grade::DEFAULT_REL_TOL,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SettingsFile {
    /// Parsed separately so each table is validated with its name.
    endpoints: toml::Table,
    inflight_per_host: Option<usize>,
    sandbox: Option<SandboxConfig>,
    duo: DuoSection,
    orchestra: RosterConfig,
    forge: Option<PipelineConfig>,
    bench: BenchSection,
}

/// A parsed settings file with live endpoint clients.
#[derive(Debug, Clone)]
pub struct Settings {
    pub endpoints: EndpointRegistry,
    pub sandbox: SandboxConfig,
    pub duo: DuoSection,
    pub orchestra: RosterConfig,
    pub forge: Option<PipelineConfig>,
    pub bench: BenchSection,
    pub base_dir: PathBuf,
}

impl Settings {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let file: SettingsFile = toml::from_str(text).context("parsing settings")?;
        let configs = parse_endpoint_configs(text)?;
        let endpoints = EndpointRegistry::from_configs(
            &configs,
            base_dir,
            file.inflight_per_host.unwrap_or(DEFAULT_INFLIGHT_PER_HOST),
        )?;
        if file.bench.parallelism == 0 {
            bail!("[bench] parallelism must be at least 1");
        }
        Ok(Self {
            endpoints,
            sandbox: file.sandbox.unwrap_or_default(),
            duo: file.duo,
            orchestra: file.orchestra,
            forge: file.forge,
            bench: file.bench,
            base_dir: base_dir.to_path_buf(),
        })
    }

    /// Loads `path`. A missing file is only accepted when `required` is false,
    /// in which case every section takes its default.
    pub fn load(path: &Path, required: bool) -> Result<Self> {
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text, &base).with_context(|| format!("in {}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && !required => {
                log::debug!("{} not found; using defaults", path.display());
                Self::parse("", &base)
            }
            Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
        }
    }

    /// The endpoint a single-agent command should use.
    pub fn pick_endpoint(&self, explicit: Option<&str>, section: Option<&str>) -> Result<String> {
        if let Some(name) = explicit.or(section) {
            return Ok(name.to_string());
        }
        let mut names = self.endpoints.names();
        match (names.next(), names.next()) {
            (Some(only), None) => Ok(only.to_string()),
            (None, _) => bail!("no endpoints configured; add an [endpoints.<name>] table"),
            _ => bail!("several endpoints configured; choose one with --endpoint"),
        }
    }
}

//! Runs launched through `POST /runs`.
//!
//! The named config is a settings file in the `femagent.toml` format. The
//! `problem` field is a registry id when the config's `[bench] registry`
//! holds it, otherwise a path to a problem file. Duo and orchestra runs
//! stream into the reserved session; orchestra gates wait for decisions
//! posted over HTTP. Bench and forge runs write under the run's artifact
//! directory and post only a final status to the reserved session.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use femagent_bench::{accuracy_report, load_registry_unchecked, run_benchmark, RunOptions};
use femagent_core::chat::TranscriptStatus;
use femagent_forge::Pipeline;
use femagent_store::{EventPayload, LaunchContext, LaunchRequest, LaunchResult, RunKind, RunLauncher, RunStatus};

use crate::problem::{load_problem, Problem};
use crate::runs;
use crate::settings::Settings;

/// Resolves configs relative to `base_dir` (reply scripts, registries, seed files).
#[derive(Debug, Clone)]
pub struct SettingsLauncher {
    pub base_dir: PathBuf,
}

impl SettingsLauncher {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self { base_dir: base_dir.into() }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    fn problem(&self, settings: &Settings, req: &LaunchRequest) -> Result<Problem> {
        let reference = req.problem.as_deref().ok_or_else(|| anyhow!("this run kind needs a problem"))?;
        let registry_dir = self.resolve(&settings.bench.registry);
        if registry_dir.is_dir() {
            if let Some(p) = load_registry_unchecked(&registry_dir)?.get(reference) {
                return Ok(Problem::from(p));
            }
        }
        load_problem(&self.resolve(Path::new(reference)))
    }

    fn run(&self, req: &LaunchRequest, ctx: &LaunchContext) -> Result<String> {
        let text = String::from_utf8(ctx.config.clone())?;
        let settings = Settings::parse(&text, &self.base_dir)?;
        let sid = ctx.session_id.as_str();
        match ctx.run.kind {
            RunKind::Duo => {
                let problem = self.problem(&settings, req)?;
                let endpoint = settings.pick_endpoint(None, settings.duo.endpoint.as_deref())?;
                let (o, t) =
                    runs::duo_session(&settings, &endpoint, &problem, sid, settings.duo.limits, Some(ctx.observer()))?;
                let code = o.final_code.as_ref().map(|c| c.source.as_str());
                runs::write_session_output(&ctx.artifact_dir(), &t, code, &o)?;
                Ok(format!("{:?} after {} rounds", o.status, o.rounds_used))
            }
            RunKind::Orchestra => {
                let problem = self.problem(&settings, req)?;
                let (o, t) = runs::orchestra_session(
                    &settings,
                    &settings.orchestra,
                    &problem,
                    sid,
                    ctx.admin(),
                    Some(ctx.observer()),
                )?;
                let code = o.final_code.as_ref().map(|c| c.source.as_str());
                runs::write_session_output(&ctx.artifact_dir(), &t, code, &o)?;
                Ok(format!("{:?}", o.status))
            }
            RunKind::Baseline | RunKind::Bench => {
                let kind = if ctx.run.kind == RunKind::Baseline {
                    crate::settings::StrategyKind::Baseline
                } else {
                    settings.bench.strategy
                };
                let strategy = runs::strategy(&settings, kind, None, None)?;
                let registry = load_registry_unchecked(&self.resolve(&settings.bench.registry))?;
                let problems: Vec<_> = match &req.problem {
                    Some(id) => {
                        vec![registry.get(id).cloned().ok_or_else(|| anyhow!("problem {id} not in the registry"))?]
                    }
                    None => registry.problems().to_vec(),
                };
                let dir = ctx.artifact_dir();
                let opts = RunOptions {
                    ledger_path: dir.join("ledger.jsonl"),
                    transcripts_dir: dir.join("transcripts"),
                    parallelism: settings.bench.parallelism,
                };
                let ledger = run_benchmark(&problems, strategy.as_ref(), &opts)?;
                let report = accuracy_report(&ledger, strategy.framework_id(), &registry);
                ctx.store.save_report(&ctx.run.run_id, &serde_json::to_value(&report)?)?;
                Ok(format!("{} entries; report {}", ledger.len(), ctx.run.run_id))
            }
            RunKind::Forge => {
                let mut cfg = settings.forge.clone().ok_or_else(|| anyhow!("config has no [forge] section"))?;
                cfg.output_dir = ctx.artifact_dir().join("forge");
                cfg.seed_paths = cfg.seed_paths.iter().map(|p| self.resolve(p)).collect();
                let endpoints =
                    femagent_forge::ForgeEndpoints::from_registry(&settings.endpoints, &cfg.stage_endpoints)?;
                let runner = femagent_core::sandbox::Sandbox::new(cfg.sandbox.clone());
                let m = Pipeline::new(cfg, &endpoints, &runner).run()?;
                let problems = m.check();
                if !problems.is_empty() {
                    bail!("manifest check failed: {}", problems.join("; "));
                }
                Ok(format!("{} records, {} total", m.counts.records, m.counts.total))
            }
        }
    }
}

impl RunLauncher for SettingsLauncher {
    fn launch(&self, req: &LaunchRequest, ctx: &LaunchContext) -> LaunchResult {
        let (status, message) = match self.run(req, ctx) {
            Ok(m) => (RunStatus::Succeeded, m),
            Err(e) => (RunStatus::Failed, format!("{e:#}")),
        };
        // bench, forge and failed launches never streamed a terminal status; followers need one to close
        let terminal = ctx.hub.read_events(&ctx.session_id, 0).is_ok_and(|ev| ev.iter().any(|e| e.is_terminal()));
        if !terminal {
            let s = if status == RunStatus::Succeeded { TranscriptStatus::Succeeded } else { TranscriptStatus::Failed };
            if let Err(e) = ctx.hub.append(&ctx.session_id, EventPayload::Status { status: s }) {
                log::error!("run {}: {e}", ctx.run.run_id);
            }
        }
        if status == RunStatus::Failed {
            log::warn!("run {} failed: {message}", ctx.run.run_id);
        }
        LaunchResult { status, extra_sessions: Vec::new(), message: Some(message) }
    }
}

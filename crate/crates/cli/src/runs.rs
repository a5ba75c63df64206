//! Single-session runs and benchmark strategies built from [`Settings`].

use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use femagent_bench::{BaselineStrategy, DuoStrategy, OrchestraStrategy, Strategy};
use femagent_core::duo::{run_duo, DuoLimits, DuoOutcome};
use femagent_core::orchestra::{run_orchestra, AdminChannel, OrchestraOutcome, RosterConfig};
use femagent_core::roles::{DUO_CODER_PROMPT, USER};
use femagent_core::sandbox::{CodeRunner, Sandbox};
use femagent_core::session::{Session, SessionObserver};
use femagent_core::{AgentSpec, Transcript};

use crate::problem::Problem;
use crate::settings::{Settings, StrategyKind};

pub const DUO_CODER: &str = "fenics_coder";

pub fn sandbox(settings: &Settings) -> Arc<dyn CodeRunner> {
    Arc::new(Sandbox::new(settings.sandbox.clone()))
}

pub fn duo_coder(endpoint: &str) -> AgentSpec {
    AgentSpec::assistant(DUO_CODER, DUO_CODER_PROMPT, endpoint)
}

fn session(id: &str, roster: Vec<String>, observer: Option<Arc<dyn SessionObserver>>) -> Session {
    let s = Session::new(id, roster);
    match observer {
        Some(o) => s.with_observer(o),
        None => s,
    }
}

pub fn duo_session(
    settings: &Settings,
    endpoint: &str,
    problem: &Problem,
    session_id: &str,
    limits: DuoLimits,
    observer: Option<Arc<dyn SessionObserver>>,
) -> Result<(DuoOutcome, Transcript)> {
    let ep = settings.endpoints.get(endpoint)?;
    let coder = duo_coder(endpoint);
    let runner = sandbox(settings);
    let mut s = session(session_id, vec![USER.into(), coder.name.clone(), "executor".into()], observer);
    let outcome = run_duo(&mut s, &problem.prompt, &coder, ep.as_ref(), runner.as_ref(), limits)?;
    Ok((outcome, s.into_transcript()))
}

pub fn orchestra_session(
    settings: &Settings,
    roster: &RosterConfig,
    problem: &Problem,
    session_id: &str,
    admin: Arc<dyn AdminChannel>,
    observer: Option<Arc<dyn SessionObserver>>,
) -> Result<(OrchestraOutcome, Transcript)> {
    let roster_cfg = roster;
    let roster = roster_cfg.build(settings.endpoints.clone(), sandbox(settings), admin)?;
    let mut s = session(session_id, roster.names(), observer);
    let outcome = run_orchestra(&mut s, &problem.prompt, &roster, roster_cfg.limits)?;
    Ok((outcome, s.into_transcript()))
}

/// Writes `transcript.jsonl`, the final script (if any) and `outcome.json` into `out`.
pub fn write_session_output(
    out: &Path,
    transcript: &Transcript,
    final_code: Option<&str>,
    outcome: &impl serde::Serialize,
) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("transcript.jsonl"), transcript.to_jsonl())?;
    if let Some(code) = final_code {
        std::fs::write(out.join(femagent_core::sandbox::DEFAULT_SCRIPT_NAME), code)?;
    }
    std::fs::write(out.join("outcome.json"), serde_json::to_string_pretty(outcome)?)?;
    Ok(())
}

/// A benchmark strategy. Orchestra strategies decide every gate by the auto-policy.
pub fn strategy(
    settings: &Settings,
    kind: StrategyKind,
    endpoint: Option<&str>,
    framework_id: Option<&str>,
) -> Result<Box<dyn Strategy>> {
    let runner = sandbox(settings);
    Ok(match kind {
        StrategyKind::Orchestra => {
            let roster = settings.orchestra.build(
                settings.endpoints.clone(),
                runner,
                Arc::new(femagent_core::orchestra::Headless),
            )?;
            let id = framework_id
                .map_or_else(|| format!("orchestra/{}", settings.orchestra.default_endpoint), str::to_string);
            let mut s = OrchestraStrategy::new(id, roster);
            s.limits = settings.orchestra.limits;
            Box::new(s)
        }
        StrategyKind::Duo => {
            let name = settings
                .pick_endpoint(endpoint, settings.bench.endpoint.as_deref().or(settings.duo.endpoint.as_deref()))?;
            let id = framework_id.map_or_else(|| format!("duo/{name}"), str::to_string);
            let mut s = DuoStrategy::new(id, duo_coder(&name), settings.endpoints.get(&name)?, runner);
            s.limits = settings.duo.limits;
            Box::new(s)
        }
        StrategyKind::Baseline => {
            let name = settings.pick_endpoint(endpoint, settings.bench.endpoint.as_deref())?;
            let id = framework_id.map_or_else(|| format!("baseline/{name}"), str::to_string);
            Box::new(BaselineStrategy::new(id, &name, settings.endpoints.get(&name)?, runner))
        }
    })
}

//! Running a strategy over a set of problems.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use femagent_core::chat::{CodeBlock, Transcript};
use femagent_core::duo::{run_duo, DuoLimits};
use femagent_core::gateway::ChatEndpoint;
use femagent_core::orchestra::{run_orchestra, OrchestraLimits, Roster};
use femagent_core::roles::AgentSpec;
use femagent_core::sandbox::{CodeRunner, ExecutionReport};
use femagent_core::session::Session;
use femagent_core::{Clock, SystemClock};

use crate::baseline::run_baseline_two_shot;
use crate::grade::Verdict;
use crate::ledger::{LedgerEntry, LedgerError, RunLedger};
use crate::registry::ProblemSpec;
use crate::scalars::parse_scalars;

/// What a strategy produced for one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Attempt {
    pub status: String,
    pub final_code: Option<CodeBlock>,
    pub final_report: Option<ExecutionReport>,
    pub transcripts: Vec<Transcript>,
    pub failure: Option<String>,
}

impl Attempt {
    pub fn failed(reason: impl Into<String>) -> Self {
        Self {
            status: "failed".into(),
            final_code: None,
            final_report: None,
            transcripts: Vec::new(),
            failure: Some(reason.into()),
        }
    }
}

pub trait Strategy: Send + Sync {
    /// Ledger key for this framework, e.g. `duo/gpt-oss-ft`.
    fn framework_id(&self) -> &str;

    /// Runs one problem. `session_prefix` is unique per (framework, problem).
    fn attempt(&self, problem: &ProblemSpec, session_prefix: &str) -> Attempt;
}

fn status_name<T: serde::Serialize>(s: &T) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

pub struct DuoStrategy {
    pub framework_id: String,
    pub coder: AgentSpec,
    pub endpoint: Arc<dyn ChatEndpoint>,
    pub runner: Arc<dyn CodeRunner>,
    pub limits: DuoLimits,
    pub clock: Arc<dyn Clock>,
}

impl DuoStrategy {
    pub fn new(
        framework_id: impl Into<String>,
        coder: AgentSpec,
        endpoint: Arc<dyn ChatEndpoint>,
        runner: Arc<dyn CodeRunner>,
    ) -> Self {
        Self {
            framework_id: framework_id.into(),
            coder,
            endpoint,
            runner,
            limits: DuoLimits::default(),
            clock: Arc::new(SystemClock),
        }
    }
}

impl Strategy for DuoStrategy {
    fn framework_id(&self) -> &str {
        &self.framework_id
    }

    fn attempt(&self, problem: &ProblemSpec, session_prefix: &str) -> Attempt {
        let roster = vec![femagent_core::roles::USER.to_string(), self.coder.name.clone(), "executor".into()];
        let mut session = Session::new(session_prefix, roster).with_clock(self.clock.clone());
        match run_duo(
            &mut session,
            &problem.prompt,
            &self.coder,
            self.endpoint.as_ref(),
            self.runner.as_ref(),
            self.limits,
        ) {
            Ok(o) => Attempt {
                status: status_name(&o.status),
                final_code: o.final_code,
                final_report: o.final_report,
                transcripts: vec![session.into_transcript()],
                failure: o.failure,
            },
            Err(e) => Attempt::failed(e.to_string()),
        }
    }
}

pub struct OrchestraStrategy {
    pub framework_id: String,
    pub roster: Roster,
    pub limits: OrchestraLimits,
    pub clock: Arc<dyn Clock>,
}

impl OrchestraStrategy {
    pub fn new(framework_id: impl Into<String>, roster: Roster) -> Self {
        Self {
            framework_id: framework_id.into(),
            roster,
            limits: OrchestraLimits::default(),
            clock: Arc::new(SystemClock),
        }
    }
}

impl Strategy for OrchestraStrategy {
    fn framework_id(&self) -> &str {
        &self.framework_id
    }

    fn attempt(&self, problem: &ProblemSpec, session_prefix: &str) -> Attempt {
        let mut session = Session::new(session_prefix, self.roster.names()).with_clock(self.clock.clone());
        match run_orchestra(&mut session, &problem.prompt, &self.roster, self.limits) {
            Ok(o) => Attempt {
                status: status_name(&o.status),
                final_code: o.final_code,
                final_report: o.final_report,
                transcripts: vec![session.into_transcript()],
                failure: o.reason,
            },
            Err(e) => Attempt::failed(e.to_string()),
        }
    }
}

pub struct BaselineStrategy {
    pub framework_id: String,
    pub coder: AgentSpec,
    pub endpoint: Arc<dyn ChatEndpoint>,
    pub runner: Arc<dyn CodeRunner>,
    pub context_window: usize,
    pub clock: Arc<dyn Clock>,
}

impl BaselineStrategy {
    pub fn new(
        framework_id: impl Into<String>,
        endpoint_name: &str,
        endpoint: Arc<dyn ChatEndpoint>,
        runner: Arc<dyn CodeRunner>,
    ) -> Self {
        Self {
            framework_id: framework_id.into(),
            coder: crate::baseline::baseline_coder(endpoint_name),
            endpoint,
            runner,
            context_window: femagent_core::duo::DEFAULT_CONTEXT_WINDOW,
            clock: Arc::new(SystemClock),
        }
    }
}

impl Strategy for BaselineStrategy {
    fn framework_id(&self) -> &str {
        &self.framework_id
    }

    fn attempt(&self, problem: &ProblemSpec, session_prefix: &str) -> Attempt {
        let o = run_baseline_two_shot(
            &problem.prompt,
            &self.coder,
            self.endpoint.as_ref(),
            self.runner.as_ref(),
            session_prefix,
            self.clock.clone(),
            self.context_window,
        );
        let last = o.final_attempt().clone();
        let status = if last.executed() { "executed" } else { "not-executed" };
        Attempt {
            status: format!("{status}-attempt-{}", o.attempts.len()),
            final_code: last.final_code,
            final_report: last.report,
            transcripts: o.transcripts,
            failure: last.failure,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub ledger_path: PathBuf,
    pub transcripts_dir: PathBuf,
    pub parallelism: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parallelism must be at least 1")]
    NoWorkers,
}

/// Path-safe form of a framework id (`duo/gpt-oss-ft` becomes `duo_gpt-oss-ft`).
pub fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn write_transcript(dir: &Path, framework: &str, t: &Transcript) -> Result<String, BenchError> {
    let rel = format!("{}/{}.jsonl", slug(framework), slug(t.session_id()));
    let path = dir.join(&rel);
    let io_err = |source| BenchError::Io { path: path.clone(), source };
    std::fs::create_dir_all(path.parent().expect("has parent")).map_err(io_err)?;
    std::fs::write(&path, t.to_jsonl()).map_err(io_err)?;
    Ok(rel)
}

fn to_entry(framework: &str, problem: &ProblemSpec, a: Attempt, transcript_refs: Vec<String>) -> LedgerEntry {
    let executable = a.final_report.as_ref().is_some_and(ExecutionReport::is_success);
    let scalars = a.final_report.as_ref().map(|r| parse_scalars(&r.stdout)).unwrap_or_default();
    LedgerEntry {
        framework_id: framework.to_string(),
        problem_id: problem.id.clone(),
        status: a.status,
        executable,
        final_code: a.final_code,
        final_report: a.final_report,
        transcript_refs,
        scalars,
        failure: a.failure,
        verdict: Verdict::ungraded(problem.id.clone(), executable),
    }
}

/// Runs `strategy` on every problem without a ledger entry yet.
///
/// Problems run on `parallelism` worker threads. Each finished problem is
/// appended to the ledger file immediately, so an interrupted run resumes by
/// calling this again. A panicking or failing problem is recorded as not
/// executable and does not stop the others.
pub fn run_benchmark(
    problems: &[ProblemSpec],
    strategy: &dyn Strategy,
    opts: &RunOptions,
) -> Result<RunLedger, BenchError> {
    if opts.parallelism == 0 {
        return Err(BenchError::NoWorkers);
    }
    let framework = strategy.framework_id().to_string();
    let mut ledger = RunLedger::load_or_default(&opts.ledger_path)?;
    if let Some(parent) = opts.ledger_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| BenchError::Io { path: parent.into(), source })?;
    }
    let todo: Vec<&ProblemSpec> = problems.iter().filter(|p| !ledger.contains(&framework, &p.id)).collect();
    if todo.len() < problems.len() {
        log::info!("{framework}: {} of {} problems already in the ledger", problems.len() - todo.len(), problems.len());
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Attempt)>();
    let mut first_err = None;
    std::thread::scope(|scope| {
        for _ in 0..opts.parallelism.min(todo.len()) {
            let tx = tx.clone();
            let (next, todo, framework) = (&next, &todo, &framework);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(problem) = todo.get(i) else { break };
                let prefix = format!("{}-{}", slug(framework), problem.id);
                let attempt = catch_unwind(AssertUnwindSafe(|| strategy.attempt(problem, &prefix)))
                    .unwrap_or_else(|p| Attempt::failed(format!("strategy panicked: {}", panic_message(p))));
                if tx.send((i, attempt)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // single writer: transcripts and ledger lines are written only here
        for (i, attempt) in rx {
            let problem = todo[i];
            let mut refs = Vec::new();
            for t in &attempt.transcripts {
                match write_transcript(&opts.transcripts_dir, &framework, t) {
                    Ok(r) => refs.push(r),
                    Err(e) => log::error!("{}: {e}", problem.id),
                }
            }
            let entry = to_entry(&framework, problem, attempt, refs);
            log::info!("{framework}/{}: {} (executable={})", problem.id, entry.status, entry.executable);
            if let Err(e) = RunLedger::append(&opts.ledger_path, &entry) {
                first_err.get_or_insert(e);
            }
            ledger.insert(entry);
        }
    });
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(ledger),
    }
}

//! Two independent zero-shot attempts, no agents.
//!
//! Attempt 1 runs in a fresh session. If its code executes it is final.
//! Otherwise attempt 2 runs in another fresh session built only from the
//! problem prompt, and its code is final whatever happens when it runs.

use std::sync::Arc;

use femagent_core::chat::{extract_fenced, CodeBlock, MessageKind, Transcript, TranscriptStatus};
use femagent_core::gateway::ChatEndpoint;
use femagent_core::roles::{AgentSpec, Role, BASELINE_PROMPT, USER};
use femagent_core::sandbox::{CodeRunner, ExecutionReport};
use femagent_core::session::Session;
use femagent_core::Clock;
use serde::{Deserialize, Serialize};

pub const MAX_ATTEMPTS: u32 = 2;

pub fn baseline_coder(endpoint: &str) -> AgentSpec {
    AgentSpec::assistant(Role::Coder.name(), BASELINE_PROMPT, endpoint)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub session_id: String,
    pub final_code: Option<CodeBlock>,
    pub report: Option<ExecutionReport>,
    /// Set when the attempt ended without running anything.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl AttemptRecord {
    pub fn executed(&self) -> bool {
        self.report.as_ref().is_some_and(ExecutionReport::is_success)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub attempts: Vec<AttemptRecord>,
    pub transcripts: Vec<Transcript>,
}

impl BaselineOutcome {
    pub fn final_attempt(&self) -> &AttemptRecord {
        self.attempts.last().expect("at least one attempt")
    }

    pub fn executable(&self) -> bool {
        self.final_attempt().executed()
    }

    pub fn completion_calls(&self) -> usize {
        self.attempts.len()
    }
}

/// One zero-shot attempt in its own session.
fn attempt(
    session_id: String,
    prompt: &str,
    coder: &AgentSpec,
    endpoint: &dyn ChatEndpoint,
    runner: &dyn CodeRunner,
    clock: &Arc<dyn Clock>,
    context_window: usize,
) -> (AttemptRecord, Transcript) {
    let executor = Role::Executor.name();
    let mut session = Session::new(session_id.clone(), vec![USER.into(), coder.name.clone(), executor.into()])
        .with_clock(clock.clone());
    let mut rec = AttemptRecord { session_id, final_code: None, report: None, failure: None };

    let result = (|| -> Result<(), String> {
        session.post(USER, MessageKind::Text, prompt).map_err(|e| e.to_string())?;
        let reply = session.ask(coder, endpoint, context_window, None).map_err(|e| e.to_string())?;
        let blocks = extract_fenced(&reply.content);
        let kind = if blocks.is_empty() { MessageKind::Text } else { MessageKind::Code };
        session.post(&coder.name, kind, reply.content).map_err(|e| e.to_string())?;
        let code = blocks.into_iter().last().ok_or("reply contained no code block")?;
        let report = runner.run(&code);
        session.post(executor, MessageKind::ExecReport, report.to_json()).map_err(|e| e.to_string())?;
        rec.final_code = Some(code);
        rec.report = Some(report);
        Ok(())
    })();
    if let Err(e) = result {
        rec.failure = Some(e);
    }
    let status = if rec.executed() { TranscriptStatus::Succeeded } else { TranscriptStatus::Failed };
    let _ = session.finish(status);
    (rec, session.into_transcript())
}

/// Runs the two-attempt protocol. Sessions are named `<session_prefix>-a1` and `-a2`.
pub fn run_baseline_two_shot(
    prompt: &str,
    coder: &AgentSpec,
    endpoint: &dyn ChatEndpoint,
    runner: &dyn CodeRunner,
    session_prefix: &str,
    clock: Arc<dyn Clock>,
    context_window: usize,
) -> BaselineOutcome {
    let mut out = BaselineOutcome { attempts: Vec::new(), transcripts: Vec::new() };
    for n in 1..=MAX_ATTEMPTS {
        let (rec, transcript) =
            attempt(format!("{session_prefix}-a{n}"), prompt, coder, endpoint, runner, &clock, context_window);
        let done = rec.executed();
        out.attempts.push(rec);
        out.transcripts.push(transcript);
        if done {
            break;
        }
    }
    out
}

/// Checks that a later attempt's transcript carries nothing from an earlier one:
/// different session, and none of the earlier non-prompt messages appear in it.
pub fn audit_isolation(first: &Transcript, second: &Transcript) -> Result<(), String> {
    if first.session_id() == second.session_id() {
        return Err(format!("both attempts share session `{}`", first.session_id()));
    }
    let Some(prompt) = second.messages().first() else { return Ok(()) };
    if prompt.sender != USER {
        return Err(format!("second session opens with `{}`, not the user prompt", prompt.sender));
    }
    for earlier in first.messages().iter().filter(|m| m.sender != USER) {
        if earlier.content.is_empty() {
            continue;
        }
        if second.messages().iter().any(|m| m.content.contains(&earlier.content) && m.content != prompt.content) {
            return Err(format!("message {} of the first attempt reappears in the second", earlier.seq));
        }
        if prompt.content.contains(&earlier.content) {
            return Err(format!("message {} of the first attempt leaked into the prompt", earlier.seq));
        }
    }
    Ok(())
}

//! The two-agent loop: a coder assistant and an executor proxy alternate
//! until the code runs cleanly or a budget runs out. No human gate.

use serde::{Deserialize, Serialize};

use crate::chat::{extract_code_blocks, ChatMessage, CodeBlock, MessageKind, TranscriptStatus};
use crate::gateway::{ChatEndpoint, FinishReason};
use crate::roles::{AgentSpec, Role, USER};
use crate::sandbox::{CodeRunner, ExecutionReport};
use crate::session::{Session, SessionError};

pub const DEFAULT_MAX_ROUNDS: u32 = 8;
pub const DEFAULT_CONTEXT_WINDOW: usize = 128_000;
pub const DEFAULT_SESSION_TOKEN_BUDGET: u64 = 400_000;

pub(crate) const NO_CODE_NUDGE: &str =
    "No code block was found in your last reply. Reply with the complete script in a single fenced code block.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DuoLimits {
    /// Executor invocations per session.
    pub max_rounds: u32,
    /// Prompt plus output tokens over the whole session.
    pub session_token_budget: u64,
    /// Estimated tokens per rendered prompt.
    pub context_window: usize,
}

impl Default for DuoLimits {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            session_token_budget: DEFAULT_SESSION_TOKEN_BUDGET,
            context_window: DEFAULT_CONTEXT_WINDOW,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DuoError {
    #[error("limits must be strictly positive")]
    InvalidLimits,
    #[error("coder `{0}` is not an LLM-backed assistant")]
    CoderNotAssistant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DuoStatus {
    ExecutedClean,
    ExhaustedRounds,
    ExhaustedTokens,
    Failed,
}

impl DuoStatus {
    pub fn transcript_status(self) -> TranscriptStatus {
        match self {
            DuoStatus::ExecutedClean => TranscriptStatus::Succeeded,
            DuoStatus::ExhaustedRounds | DuoStatus::ExhaustedTokens => TranscriptStatus::Exhausted,
            DuoStatus::Failed => TranscriptStatus::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuoOutcome {
    pub status: DuoStatus,
    pub rounds_used: u32,
    pub final_code: Option<CodeBlock>,
    pub final_report: Option<ExecutionReport>,
    pub transcript_ref: String,
    /// Why the session failed, when it did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// What one coder turn produced.
pub(crate) enum CoderTurn {
    Code(CodeBlock),
    NoCode,
    Truncated,
}

/// Asks the coder for code, nudging once if the reply has none.
pub(crate) fn coder_turn(
    session: &mut Session,
    coder: &AgentSpec,
    endpoint: &dyn ChatEndpoint,
    context_window: usize,
    nudger: &str,
) -> Result<CoderTurn, SessionError> {
    for attempt in 0..2 {
        if attempt == 1 {
            session.post(nudger, MessageKind::Text, NO_CODE_NUDGE)?;
        }
        let reply = session.ask(coder, endpoint, context_window, None)?;
        let msg = post_reply(session, &coder.name, reply.content)?;
        if reply.finish_reason == FinishReason::Length {
            return Ok(CoderTurn::Truncated);
        }
        if let Some(block) = extract_code_blocks(&msg).pop() {
            return Ok(CoderTurn::Code(block));
        }
    }
    Ok(CoderTurn::NoCode)
}

/// Posts an assistant reply, as kind=code when it carries a fenced block.
pub(crate) fn post_reply(session: &mut Session, sender: &str, content: String) -> Result<ChatMessage, SessionError> {
    let has_code = !crate::chat::extract_fenced(&content).is_empty();
    let kind = if has_code { MessageKind::Code } else { MessageKind::Text };
    Ok(session.post(sender, kind, content)?)
}

/// Runs the two-agent loop on an already created (empty) session.
pub fn run_duo(
    session: &mut Session,
    problem_prompt: &str,
    coder: &AgentSpec,
    endpoint: &dyn ChatEndpoint,
    runner: &dyn CodeRunner,
    limits: DuoLimits,
) -> Result<DuoOutcome, DuoError> {
    if limits.max_rounds == 0 || limits.session_token_budget == 0 || limits.context_window == 0 {
        return Err(DuoError::InvalidLimits);
    }
    if !coder.is_llm_backed() {
        return Err(DuoError::CoderNotAssistant(coder.name.clone()));
    }
    let mut outcome = DuoOutcome {
        status: DuoStatus::Failed,
        rounds_used: 0,
        final_code: None,
        final_report: None,
        transcript_ref: session.id().to_string(),
        failure: None,
    };
    let executor = Role::Executor.name();

    let result: Result<DuoStatus, SessionError> = (|| {
        session.post(USER, MessageKind::Text, problem_prompt)?;
        loop {
            if outcome.rounds_used >= limits.max_rounds {
                return Ok(DuoStatus::ExhaustedRounds);
            }
            if session.usage().totals().total_tokens() >= limits.session_token_budget {
                return Ok(DuoStatus::ExhaustedTokens);
            }
            let code = match coder_turn(session, coder, endpoint, limits.context_window, executor)? {
                CoderTurn::Code(c) => c,
                CoderTurn::Truncated => return Ok(DuoStatus::ExhaustedTokens),
                CoderTurn::NoCode => {
                    outcome.failure = Some("coder reply contained no code block after a re-ask".into());
                    return Ok(DuoStatus::Failed);
                }
            };
            let report = runner.run(&code);
            outcome.rounds_used += 1;
            session.post(executor, MessageKind::ExecReport, report.to_json())?;
            let clean = report.is_success();
            outcome.final_code = Some(code);
            outcome.final_report = Some(report);
            if clean {
                return Ok(DuoStatus::ExecutedClean);
            }
        }
    })();

    outcome.status = match result {
        Ok(s) => s,
        Err(e) => {
            outcome.failure = Some(e.to_string());
            DuoStatus::Failed
        }
    };
    // the transcript may already be terminal only if a caller finished it; ignore that case
    let _ = session.finish(outcome.status.transcript_status());
    Ok(outcome)
}

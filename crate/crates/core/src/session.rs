//! A running conversation: transcript, clock, token usage and observers.

use std::sync::Arc;

use crate::chat::{render_context, ChatError, ChatMessage, MessageKind, Transcript, TranscriptStatus};
use crate::clock::{Clock, SystemClock};
use crate::gateway::{ChatEndpoint, CompletionResult, GatewayError, UsageLedger};
use crate::roles::AgentSpec;

/// Receives every message and status change of a session as it happens.
pub trait SessionObserver: Send + Sync {
    fn on_message(&self, session_id: &str, message: &ChatMessage);

    fn on_status(&self, _session_id: &str, _status: TranscriptStatus) {}
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub fn new_session_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

pub struct Session {
    transcript: Transcript,
    clock: Arc<dyn Clock>,
    usage: UsageLedger,
    observers: Vec<Arc<dyn SessionObserver>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("transcript", &self.transcript).field("usage", &self.usage).finish()
    }
}

impl Session {
    pub fn new(session_id: impl Into<String>, roster: Vec<String>) -> Self {
        Self {
            transcript: Transcript::new(session_id, roster),
            clock: Arc::new(SystemClock),
            usage: UsageLedger::new(),
            observers: Vec::new(),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_observer(mut self, observer: Arc<dyn SessionObserver>) -> Self {
        self.observers.push(observer);
        self
    }

    pub fn id(&self) -> &str {
        self.transcript.session_id()
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }

    pub fn usage(&self) -> &UsageLedger {
        &self.usage
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn post(
        &mut self,
        sender: &str,
        kind: MessageKind,
        content: impl Into<String>,
    ) -> Result<ChatMessage, ChatError> {
        let msg = self.transcript.append(sender, kind, content, self.clock.now())?.clone();
        for o in &self.observers {
            o.on_message(self.transcript.session_id(), &msg);
        }
        Ok(msg)
    }

    pub fn finish(&mut self, status: TranscriptStatus) -> Result<(), ChatError> {
        self.transcript.finish(status)?;
        for o in &self.observers {
            o.on_status(self.transcript.session_id(), status);
        }
        Ok(())
    }

    /// Asks `agent` for a reply to the current transcript without posting it.
    /// `instruction`, when given, is appended as a final user turn that never
    /// enters the transcript.
    pub fn ask(
        &mut self,
        agent: &AgentSpec,
        endpoint: &dyn ChatEndpoint,
        window_budget: usize,
        instruction: Option<&str>,
    ) -> Result<CompletionResult, SessionError> {
        let mut ctx = render_context(&self.transcript, agent, window_budget)?;
        if let Some(text) = instruction {
            ctx.push_user(text);
        }
        let result = endpoint.complete(&ctx)?;
        self.usage.record(&agent.name, &result);
        Ok(result)
    }
}

//! Group-chat messages, transcripts, code-block extraction and prompt rendering.
//!
//! A [`Transcript`] is the single totally ordered record that every agent
//! reads from and appends to. Sequence numbers start at 1 and never skip.
//! Persisted transcripts are JSON Lines: one header object followed by one
//! object per message.

use std::fmt;
use std::io::{self, BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::roles::{AgentSpec, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    Text,
    Code,
    ExecReport,
    Control,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub seq: u64,
    pub sender: String,
    pub kind: MessageKind,
    pub content: String,
    pub created_at: DateTime<Utc>,
}

// Timestamps do not take part in equality.
impl PartialEq for ChatMessage {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq && self.sender == other.sender && self.kind == other.kind && self.content == other.content
    }
}

impl Eq for ChatMessage {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranscriptStatus {
    Running,
    Succeeded,
    Exhausted,
    TerminatedByAdmin,
    Failed,
}

impl TranscriptStatus {
    pub fn is_terminal(self) -> bool {
        self != TranscriptStatus::Running
    }
}

impl fmt::Display for TranscriptStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TranscriptStatus::Running => "running",
            TranscriptStatus::Succeeded => "succeeded",
            TranscriptStatus::Exhausted => "exhausted",
            TranscriptStatus::TerminatedByAdmin => "terminated-by-admin",
            TranscriptStatus::Failed => "failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    #[error("transcript {session_id} is {status}; only running transcripts accept messages")]
    TerminalTranscript { session_id: String, status: TranscriptStatus },
    #[error("exec-report messages come only from the executor, not `{0}`")]
    ExecReportSender(String),
    #[error("cannot move transcript {session_id} from {from} to {to}")]
    InvalidTransition { session_id: String, from: TranscriptStatus, to: TranscriptStatus },
    #[error(
        "context budget of {budget} tokens is below the {required} needed for the system prompt and problem statement"
    )]
    BudgetTooSmall { budget: usize, required: usize },
    #[error("agent `{0}` is not LLM-backed and has no prompt context")]
    NotAnAssistant(String),
    #[error("malformed transcript at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TranscriptHeader {
    session_id: String,
    status: TranscriptStatus,
    roster: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    session_id: String,
    roster: Vec<String>,
    status: TranscriptStatus,
    messages: Vec<ChatMessage>,
}

impl Transcript {
    pub fn new(session_id: impl Into<String>, roster: Vec<String>) -> Self {
        Self { session_id: session_id.into(), roster, status: TranscriptStatus::Running, messages: Vec::new() }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn roster(&self) -> &[String] {
        &self.roster
    }

    pub fn status(&self) -> TranscriptStatus {
        self.status
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn last(&self) -> Option<&ChatMessage> {
        self.messages.last()
    }

    pub fn max_seq(&self) -> u64 {
        self.messages.last().map_or(0, |m| m.seq)
    }

    pub fn append(
        &mut self,
        sender: &str,
        kind: MessageKind,
        content: impl Into<String>,
        created_at: DateTime<Utc>,
    ) -> Result<&ChatMessage, ChatError> {
        if self.status.is_terminal() {
            return Err(ChatError::TerminalTranscript { session_id: self.session_id.clone(), status: self.status });
        }
        if kind == MessageKind::ExecReport && sender != Role::Executor.name() {
            return Err(ChatError::ExecReportSender(sender.to_string()));
        }
        let seq = self.max_seq() + 1;
        self.messages.push(ChatMessage { seq, sender: sender.to_string(), kind, content: content.into(), created_at });
        Ok(self.messages.last().expect("just pushed"))
    }

    /// Moves a running transcript into a terminal state. Terminal states are final.
    pub fn finish(&mut self, status: TranscriptStatus) -> Result<(), ChatError> {
        if self.status.is_terminal() || !status.is_terminal() {
            return Err(ChatError::InvalidTransition {
                session_id: self.session_id.clone(),
                from: self.status,
                to: status,
            });
        }
        self.status = status;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header =
            TranscriptHeader { session_id: self.session_id.clone(), status: self.status, roster: self.roster.clone() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for m in &self.messages {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ChatError> {
        let mut lines = r.lines().enumerate();
        let header: TranscriptHeader = match lines.next() {
            Some((_, line)) => {
                serde_json::from_str(&line?).map_err(|e| ChatError::Malformed { line: 1, reason: e.to_string() })?
            }
            None => return Err(ChatError::Malformed { line: 1, reason: "missing header".into() }),
        };
        let mut messages: Vec<ChatMessage> = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: ChatMessage =
                serde_json::from_str(&line).map_err(|e| ChatError::Malformed { line: i + 1, reason: e.to_string() })?;
            let expected = messages.last().map_or(1, |p| p.seq + 1);
            if m.seq != expected {
                return Err(ChatError::Malformed {
                    line: i + 1,
                    reason: format!("expected seq {expected}, found {}", m.seq),
                });
            }
            messages.push(m);
        }
        Ok(Self { session_id: header.session_id, roster: header.roster, status: header.status, messages })
    }
}

/// A fenced (or implicit) code block found in a message.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeBlock {
    pub index: usize,
    pub language_tag: String,
    pub source: String,
}

impl CodeBlock {
    pub fn new(source: impl Into<String>) -> Self {
        Self { index: 0, language_tag: String::new(), source: source.into() }
    }

    pub fn to_fenced(&self) -> String {
        format!("```{}\n{}\n```", self.language_tag, self.source)
    }
}

fn is_closing_fence(line: &str) -> bool {
    let t = line.trim();
    t.len() >= 3 && t.chars().all(|c| c == '`')
}

/// Triple-backtick blocks of `text` in document order. Blank blocks are skipped;
/// an unterminated fence runs to the end of the text.
pub fn extract_fenced(text: &str) -> Vec<CodeBlock> {
    let mut blocks = Vec::new();
    let mut open: Option<(String, Vec<&str>)> = None;
    for line in text.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        match open.as_mut() {
            None => {
                if let Some(rest) = line.trim_start().strip_prefix("```") {
                    open = Some((rest.trim().to_string(), Vec::new()));
                }
            }
            Some((tag, body)) => {
                if is_closing_fence(line) {
                    push_block(&mut blocks, std::mem::take(tag), body);
                    open = None;
                } else {
                    body.push(line);
                }
            }
        }
    }
    if let Some((tag, body)) = open {
        push_block(&mut blocks, tag, &body);
    }
    blocks
}

fn push_block(blocks: &mut Vec<CodeBlock>, language_tag: String, body: &[&str]) {
    let source = body.join("\n");
    if !source.trim().is_empty() {
        blocks.push(CodeBlock { index: blocks.len(), language_tag, source });
    }
}

/// Code blocks in a text or code message. A code message without fences is one block.
pub fn extract_code_blocks(message: &ChatMessage) -> Vec<CodeBlock> {
    match message.kind {
        MessageKind::Text => extract_fenced(&message.content),
        MessageKind::Code => {
            let blocks = extract_fenced(&message.content);
            if blocks.is_empty() && !message.content.trim().is_empty() && !message.content.contains("```") {
                vec![CodeBlock::new(message.content.clone())]
            } else {
                blocks
            }
        }
        MessageKind::ExecReport | MessageKind::Control => Vec::new(),
    }
}

pub fn last_code_block(message: &ChatMessage) -> Option<CodeBlock> {
    extract_code_blocks(message).pop()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMessage {
    pub role: PromptRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub content: String,
}

/// The message list sent to a chat-completion endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptContext {
    pub messages: Vec<PromptMessage>,
}

impl PromptContext {
    pub fn with_system(system_prompt: &str) -> Self {
        Self {
            messages: vec![PromptMessage { role: PromptRole::System, name: None, content: system_prompt.to_string() }],
        }
    }

    pub fn push_user(&mut self, content: impl Into<String>) {
        self.messages.push(PromptMessage { role: PromptRole::User, name: None, content: content.into() });
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn estimated_tokens(&self) -> usize {
        self.messages.iter().map(|m| estimate_tokens(&m.content)).sum()
    }

    /// Content of the most recent non-assistant, non-system message.
    pub fn latest_user_message(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == PromptRole::User).map(|m| m.content.as_str())
    }
}

/// Provider-agnostic token estimate: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Builds the prompt for `agent`: its system prompt, then the transcript in seq order.
///
/// When the estimate exceeds `window_budget`, the oldest messages are dropped
/// first; the problem statement (seq 1) is always kept.
pub fn render_context(
    transcript: &Transcript,
    agent: &AgentSpec,
    window_budget: usize,
) -> Result<PromptContext, ChatError> {
    if !agent.is_llm_backed() {
        return Err(ChatError::NotAnAssistant(agent.name.clone()));
    }
    let msgs = transcript.messages();
    let cost: Vec<usize> = msgs.iter().map(|m| estimate_tokens(&m.content)).collect();
    let pinned = estimate_tokens(&agent.system_prompt) + cost.first().copied().unwrap_or(0);
    if pinned > window_budget {
        return Err(ChatError::BudgetTooSmall { budget: window_budget, required: pinned });
    }
    let mut total: usize = pinned + cost.iter().skip(1).sum::<usize>();
    let mut first_kept = 1;
    while total > window_budget && first_kept < msgs.len() {
        total -= cost[first_kept];
        first_kept += 1;
    }

    let mut ctx = PromptContext::with_system(&agent.system_prompt);
    let kept = msgs.iter().take(1).chain(msgs.iter().skip(first_kept.max(1)));
    for m in kept {
        let (role, name) = if m.sender == agent.name {
            (PromptRole::Assistant, None)
        } else {
            (PromptRole::User, Some(m.sender.clone()))
        };
        ctx.messages.push(PromptMessage { role, name, content: m.content.clone() });
    }
    Ok(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, FixedClock};
    use crate::roles::AgentSpec;

    fn now() -> DateTime<Utc> {
        FixedClock::epoch().now()
    }

    fn msg(kind: MessageKind, content: &str) -> ChatMessage {
        ChatMessage { seq: 1, sender: "coder".into(), kind, content: content.into(), created_at: now() }
    }

    #[test]
    fn first_append_gets_seq_one() {
        let mut t = Transcript::new("s", vec![]);
        let m = t.append("coder", MessageKind::Code, "...", now()).unwrap();
        assert_eq!(m.seq, 1);
    }

    #[test]
    fn append_is_successor_of_max_seq() {
        let mut t = Transcript::new("s", vec![]);
        for _ in 0..7 {
            t.append("planner", MessageKind::Text, "x", now()).unwrap();
        }
        assert_eq!(t.max_seq(), 7);
        assert_eq!(t.append("evaluator", MessageKind::Text, "y", now()).unwrap().seq, 8);
    }

    #[test]
    fn terminal_transcript_rejects_append() {
        let mut t = Transcript::new("s", vec![]);
        t.append("user", MessageKind::Text, "p", now()).unwrap();
        t.finish(TranscriptStatus::Succeeded).unwrap();
        let err = t.append("coder", MessageKind::Code, "x", now()).unwrap_err();
        assert!(matches!(err, ChatError::TerminalTranscript { status: TranscriptStatus::Succeeded, .. }));
        assert_eq!(t.messages().len(), 1);
    }

    #[test]
    fn status_is_monotone() {
        let mut t = Transcript::new("s", vec![]);
        assert!(t.finish(TranscriptStatus::Running).is_err());
        t.finish(TranscriptStatus::Exhausted).unwrap();
        assert!(t.finish(TranscriptStatus::Failed).is_err());
        assert_eq!(t.status(), TranscriptStatus::Exhausted);
    }

    #[test]
    fn only_executor_sends_exec_reports() {
        let mut t = Transcript::new("s", vec![]);
        assert!(matches!(t.append("coder", MessageKind::ExecReport, "{}", now()), Err(ChatError::ExecReportSender(_))));
        t.append("executor", MessageKind::ExecReport, "{}", now()).unwrap();
    }

    #[test]
    fn two_fenced_blocks() {
        let m = msg(MessageKind::Text, "intro\n```python\nprint(1)\n```\nmid\n```\nx = 2\n```\nbye");
        let blocks = extract_code_blocks(&m);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].index, 0);
        assert_eq!(blocks[0].language_tag, "python");
        assert_eq!(blocks[0].source, "print(1)");
        assert_eq!(blocks[1].index, 1);
        assert_eq!(blocks[1].language_tag, "");
        assert_eq!(blocks[1].source, "x = 2");
    }

    #[test]
    fn unfenced_code_message_is_one_block() {
        let m = msg(MessageKind::Code, "from dolfin import *\nprint('ok')\n");
        let blocks = extract_code_blocks(&m);
        assert_eq!(blocks, vec![CodeBlock::new("from dolfin import *\nprint('ok')\n")]);
    }

    #[test]
    fn prose_has_no_blocks() {
        assert!(extract_code_blocks(&msg(MessageKind::Text, "I think we should use P2 elements.")).is_empty());
        assert!(extract_code_blocks(&msg(MessageKind::ExecReport, "```x```")).is_empty());
    }

    #[test]
    fn unterminated_fence_runs_to_end_and_empty_fences_are_skipped() {
        let blocks = extract_fenced("```\n\n```\n```py\na\nb");
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].index, 0);
        assert_eq!(blocks[0].source, "a\nb");
    }

    #[test]
    fn crlf_fences() {
        let blocks = extract_fenced("```python\r\nx=1\r\n```\r\n");
        assert_eq!(blocks[0].source, "x=1");
        assert_eq!(blocks[0].language_tag, "python");
    }

    fn transcript_of(contents: &[&str]) -> Transcript {
        let mut t = Transcript::new("s", vec![]);
        for (i, c) in contents.iter().enumerate() {
            let sender = if i == 0 {
                "user"
            } else if i % 2 == 0 {
                "coder"
            } else {
                "planner"
            };
            t.append(sender, MessageKind::Text, *c, now()).unwrap();
        }
        t
    }

    #[test]
    fn render_keeps_everything_under_large_budget() {
        let t = transcript_of(&["problem", "plan", "code"]);
        let agent = AgentSpec::assistant("coder", "sys", "e");
        let ctx = render_context(&t, &agent, 10_000).unwrap();
        let contents: Vec<_> = ctx.messages.iter().map(|m| m.content.as_str()).collect();
        assert_eq!(contents, vec!["sys", "problem", "plan", "code"]);
        assert_eq!(ctx.messages[0].role, PromptRole::System);
        assert_eq!(ctx.messages[1].name.as_deref(), Some("user"));
        assert_eq!(ctx.messages[3].role, PromptRole::Assistant);
    }

    #[test]
    fn render_rejects_budget_below_pinned_content() {
        let t = transcript_of(&["a problem statement of forty characters.", "x"]);
        let agent = AgentSpec::assistant("coder", "12345678", "e");
        // 2 tokens of system prompt + 10 of problem
        let err = render_context(&t, &agent, 11).unwrap_err();
        assert!(matches!(err, ChatError::BudgetTooSmall { budget: 11, required: 12 }));
        assert!(render_context(&t, &agent, 12).is_ok());
    }

    #[test]
    fn render_refuses_user_proxies() {
        let t = transcript_of(&["p"]);
        let exec = AgentSpec::for_role(Role::Executor, None);
        assert!(matches!(render_context(&t, &exec, 100), Err(ChatError::NotAnAssistant(_))));
    }

    #[test]
    fn jsonl_round_trip_and_seq_gap_detection() {
        let mut t = transcript_of(&["p", "q", "r"]);
        t.finish(TranscriptStatus::Failed).unwrap();
        let text = t.to_jsonl();
        let back = Transcript::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_jsonl(), text);

        let first = text.lines().next().unwrap();
        assert!(first.contains("\"session_id\"") && first.contains("\"roster\"") && first.contains("\"status\""));
        let second = text.lines().nth(1).unwrap();
        for key in ["\"seq\"", "\"sender\"", "\"kind\"", "\"content\"", "\"created_at\""] {
            assert!(second.contains(key), "{key}");
        }

        let gapped: String = text.lines().enumerate().filter(|(i, _)| *i != 2).map(|(_, l)| format!("{l}\n")).collect();
        assert!(matches!(Transcript::read_jsonl(gapped.as_bytes()), Err(ChatError::Malformed { .. })));
    }
}

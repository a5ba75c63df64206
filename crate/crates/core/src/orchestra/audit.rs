//! Protocol checks that need nothing but a transcript.

use crate::chat::{extract_code_blocks, ChatMessage, MessageKind, Transcript};
use crate::roles::{Role, USER};
use crate::sandbox::ExecutionReport;

use super::{GateRecord, Selection};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub seq: u64,
    pub rule: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "seq {}: {} ({})", self.seq, self.rule, self.detail)
    }
}

fn v(m: &ChatMessage, rule: &'static str, detail: impl Into<String>) -> Violation {
    Violation { seq: m.seq, rule, detail: detail.into() }
}

fn is_code_from(m: Option<&ChatMessage>, sender: &str) -> bool {
    m.is_some_and(|p| p.sender == sender && !extract_code_blocks(p).is_empty())
}

fn failed_report(m: Option<&ChatMessage>) -> bool {
    m.is_some_and(|p| {
        p.kind == MessageKind::ExecReport
            && serde_json::from_str::<ExecutionReport>(&p.content).map_or(true, |r| !r.is_success())
    })
}

/// Two-agent transcripts: every exec-report directly follows a code-bearing
/// coder message, and nothing but the final message follows a clean run.
pub fn duo_violations(t: &Transcript, coder: &str) -> Vec<Violation> {
    let msgs = t.messages();
    let mut out = Vec::new();
    for (i, m) in msgs.iter().enumerate() {
        if m.kind == MessageKind::ExecReport {
            if !is_code_from(i.checked_sub(1).map(|j| &msgs[j]), coder) {
                out.push(v(m, "exec-report-after-code", "previous message is not code from the coder"));
            }
            if let Ok(r) = serde_json::from_str::<ExecutionReport>(&m.content) {
                if r.is_success() && i + 1 != msgs.len() {
                    out.push(v(m, "clean-run-ends-session", "messages follow a clean execution"));
                }
            }
        }
    }
    out
}

/// Multi-agent transcripts: speaker order follows coordinator selections,
/// executor and corrector speak only inside coder-loop spans, and admin
/// decisions directly follow the evaluator.
pub fn orchestra_violations(t: &Transcript) -> Vec<Violation> {
    let msgs = t.messages();
    let mut out = Vec::new();
    let mut floor: Option<Role> = None;
    let coder = Role::Coder.name();
    for (i, m) in msgs.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| &msgs[j]);
        if i == 0 {
            if m.sender != USER {
                out.push(v(m, "problem-first", "seq 1 must be the problem statement"));
            }
            continue;
        }
        let Ok(role) = m.sender.parse::<Role>() else {
            out.push(v(m, "known-sender", format!("unexpected sender `{}`", m.sender)));
            continue;
        };
        match role {
            Role::Coordinator => match serde_json::from_str::<Selection>(&m.content) {
                Ok(sel) if m.kind == MessageKind::Control && sel.next.coordinator_eligible() => floor = Some(sel.next),
                _ => out.push(v(m, "coordinator-selects", "coordinator message is not a valid selection")),
            },
            Role::Admin => {
                if m.kind != MessageKind::Control || serde_json::from_str::<GateRecord>(&m.content).is_err() {
                    out.push(v(m, "admin-control", "admin message is not a gate decision"));
                }
                if prev.is_none_or(|p| p.sender != Role::Evaluator.name()) {
                    out.push(v(m, "admin-after-evaluator", "admin decision not directly after the evaluator"));
                }
            }
            Role::Executor | Role::Corrector => {
                if floor != Some(Role::Coder) {
                    out.push(v(m, "loop-containment", format!("{} outside a coder loop", m.sender)));
                }
                if m.kind == MessageKind::ExecReport && !is_code_from(prev, coder) {
                    out.push(v(m, "exec-report-after-code", "previous message is not code from the coder"));
                }
                if role == Role::Corrector && !failed_report(prev) {
                    out.push(v(m, "corrector-after-failure", "corrector did not follow a failed run"));
                }
            }
            _ => {
                if floor != Some(role) {
                    out.push(v(m, "speaker-selected", format!("{} spoke without holding the floor", m.sender)));
                }
                if role == Role::Evaluator && prev.is_some_and(|p| p.sender == Role::Evaluator.name()) {
                    out.push(v(m, "one-evaluation-per-gate", "evaluator spoke twice in a row"));
                }
            }
        }
    }
    out
}

/// Senders in seq order.
pub fn speaker_sequence(t: &Transcript) -> Vec<String> {
    t.messages().iter().map(|m| m.sender.clone()).collect()
}

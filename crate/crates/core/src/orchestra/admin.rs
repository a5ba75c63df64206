//! The evaluator-to-admin gate: requests, decisions and channels that deliver them.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::sandbox::ExitStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Continue,
    Exit,
}

impl std::str::FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continue" | "c" => Ok(Decision::Continue),
            "exit" | "e" => Ok(Decision::Exit),
            other => Err(format!("expected continue or exit, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionSource {
    Human,
    AutoPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub decision: Decision,
    pub decided_at: DateTime<Utc>,
    pub source: DecisionSource,
}

/// What the admin sees when the evaluator hands over control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRequest {
    pub session_id: String,
    /// 1 for the first gate of the session.
    pub visit: u32,
    pub evaluator_message: String,
    pub has_code: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_exit_status: Option<ExitStatus>,
    pub artifacts: Vec<String>,
    pub requested_at: DateTime<Utc>,
}

/// Delivers a human decision for a gate, or `None` when nobody answered in time.
pub trait AdminChannel: Send + Sync {
    fn request(&self, req: &GateRequest) -> Option<Decision>;
}

/// Decides gates without a human: exit once the evaluator has declared the
/// marker on a line of its own and at least `min_gate_visits` gates were held.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoPolicy {
    pub marker: String,
    pub min_gate_visits: u32,
}

impl Default for AutoPolicy {
    fn default() -> Self {
        Self { marker: "SATISFIED".into(), min_gate_visits: 1 }
    }
}

impl AutoPolicy {
    pub fn marker_present(&self, text: &str) -> bool {
        text.lines().any(|l| l.trim().trim_end_matches(['.', '!']).trim_matches('*') == self.marker)
    }

    pub fn decide(&self, req: &GateRequest) -> Decision {
        if req.visit >= self.min_gate_visits && self.marker_present(&req.evaluator_message) {
            Decision::Exit
        } else {
            Decision::Continue
        }
    }
}

/// No human attached: every gate falls through to the auto-policy.
#[derive(Debug, Clone, Copy, Default)]
pub struct Headless;

impl AdminChannel for Headless {
    fn request(&self, _req: &GateRequest) -> Option<Decision> {
        None
    }
}

/// Replays a fixed list of answers; `None` entries and an empty queue act as timeouts.
#[derive(Debug, Default)]
pub struct ScriptedAdmin {
    answers: Mutex<VecDeque<Option<Decision>>>,
    seen: Mutex<Vec<GateRequest>>,
}

impl ScriptedAdmin {
    pub fn new(answers: impl IntoIterator<Item = Option<Decision>>) -> Self {
        Self { answers: Mutex::new(answers.into_iter().collect()), seen: Mutex::new(Vec::new()) }
    }

    pub fn decisions(decisions: impl IntoIterator<Item = Decision>) -> Self {
        Self::new(decisions.into_iter().map(Some))
    }

    pub fn requests(&self) -> Vec<GateRequest> {
        self.seen.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl AdminChannel for ScriptedAdmin {
    fn request(&self, req: &GateRequest) -> Option<Decision> {
        self.seen.lock().unwrap_or_else(|e| e.into_inner()).push(req.clone());
        self.answers.lock().unwrap_or_else(|e| e.into_inner()).pop_front().flatten()
    }
}

fn stdin_lines() -> &'static Mutex<Receiver<String>> {
    static LINES: OnceLock<Mutex<Receiver<String>>> = OnceLock::new();
    LINES.get_or_init(|| {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in std::io::stdin().lock().lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Mutex::new(rx)
    })
}

/// Interactive prompt on the controlling terminal.
#[derive(Debug, Clone, Copy)]
pub struct TerminalAdmin {
    pub wait: Duration,
}

impl AdminChannel for TerminalAdmin {
    fn request(&self, req: &GateRequest) -> Option<Decision> {
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "\n--- admin gate {} (session {}) ---", req.visit, req.session_id);
        let _ = writeln!(err, "{}", req.evaluator_message.trim());
        if let Some(status) = &req.last_exit_status {
            let _ = writeln!(err, "last execution: {}", serde_json::to_string(status).unwrap_or_default());
        }
        if !req.artifacts.is_empty() {
            let _ = writeln!(err, "artifacts: {}", req.artifacts.join(", "));
        }
        let rx = stdin_lines().lock().unwrap_or_else(|e| e.into_inner());
        loop {
            let _ = write!(err, "continue or exit? [{}s] ", self.wait.as_secs());
            let _ = err.flush();
            match rx.recv_timeout(self.wait) {
                Ok(line) => match line.parse::<Decision>() {
                    Ok(d) => return Some(d),
                    Err(e) => {
                        let _ = writeln!(err, "{e}");
                    }
                },
                Err(_) => {
                    let _ = writeln!(err, "\nno answer; applying the auto-policy");
                    return None;
                }
            }
        }
    }
}

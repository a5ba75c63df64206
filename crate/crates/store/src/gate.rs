//! Admin gates answered over HTTP.
//!
//! The orchestration thread calls [`HttpAdmin::request`], which registers a
//! pending gate, publishes a gate-request event and blocks until a decision
//! is posted or the wait runs out (then the auto-policy decides).

use std::collections::HashMap;
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use femagent_core::orchestra::{AdminChannel, Decision, GateRequest};
use serde::{Deserialize, Serialize};

use crate::events::{EventHub, EventPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum GateAck {
    /// The decision resolved the pending gate.
    Accepted { visit: u32 },
    /// Same decision as the one already recorded for this gate; nothing changed.
    AlreadyRecorded { visit: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GateConflict {
    #[error("session `{0}` has no gate awaiting a decision")]
    NoPendingGate(String),
    #[error("gate {visit} of session `{session}` was already decided as {recorded:?}")]
    AlreadyDecided { session: String, visit: u32, recorded: Decision },
}

struct Pending {
    visit: u32,
    tx: Sender<Decision>,
}

#[derive(Default)]
struct SessionGates {
    pending: Option<Pending>,
    resolved: Vec<(u32, Decision)>,
}

/// Pending and resolved gates of every session. Decisions for one session are
/// serialized by the board's lock.
#[derive(Default)]
pub struct GateBoard {
    sessions: Mutex<HashMap<String, SessionGates>>,
}

impl std::fmt::Debug for GateBoard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GateBoard").finish_non_exhaustive()
    }
}

impl GateBoard {
    pub fn new() -> Self {
        Self::default()
    }

    fn open(&self, session: &str, visit: u32, tx: Sender<Decision>) {
        let mut map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(session.to_string()).or_default().pending = Some(Pending { visit, tx });
    }

    /// Closes the gate without a decision; true if it was still pending.
    fn expire(&self, session: &str, visit: u32) -> bool {
        let mut map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        let Some(g) = map.get_mut(session) else { return false };
        if g.pending.as_ref().is_some_and(|p| p.visit == visit) {
            g.pending = None;
            true
        } else {
            false
        }
    }

    /// Visit number of the gate currently awaiting a decision.
    pub fn pending_visit(&self, session: &str) -> Option<u32> {
        let map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        map.get(session).and_then(|g| g.pending.as_ref().map(|p| p.visit))
    }

    /// Applies a decision. `visit` pins it to one gate; without it the decision
    /// targets the pending gate, or repeats the latest resolved one.
    pub fn submit(&self, session: &str, decision: Decision, visit: Option<u32>) -> Result<GateAck, GateConflict> {
        let mut map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        let g = map.get_mut(session).ok_or_else(|| GateConflict::NoPendingGate(session.into()))?;
        if let Some(p) = g.pending.as_ref().filter(|p| visit.is_none_or(|v| v == p.visit)) {
            let v = p.visit;
            // the waiting side may have just timed out; the decision is still recorded
            let _ = p.tx.send(decision);
            g.pending = None;
            g.resolved.push((v, decision));
            return Ok(GateAck::Accepted { visit: v });
        }
        let previous = match visit {
            Some(v) => g.resolved.iter().rev().find(|(rv, _)| *rv == v),
            None => g.resolved.last(),
        };
        match previous {
            Some(&(v, d)) if d == decision => Ok(GateAck::AlreadyRecorded { visit: v }),
            Some(&(v, d)) => Err(GateConflict::AlreadyDecided { session: session.into(), visit: v, recorded: d }),
            None => Err(GateConflict::NoPendingGate(session.into())),
        }
    }
}

/// Admin channel that waits for a decision posted to the HTTP service.
pub struct HttpAdmin {
    board: Arc<GateBoard>,
    hub: Arc<EventHub>,
    wait: Duration,
}

impl HttpAdmin {
    pub fn new(board: Arc<GateBoard>, hub: Arc<EventHub>, wait: Duration) -> Self {
        Self { board, hub, wait }
    }
}

impl AdminChannel for HttpAdmin {
    fn request(&self, req: &GateRequest) -> Option<Decision> {
        let (tx, rx) = channel();
        self.board.open(&req.session_id, req.visit, tx);
        if let Err(e) = self.hub.append(&req.session_id, EventPayload::GateRequest { request: req.clone() }) {
            log::error!("session {}: gate request not published: {e}", req.session_id);
        }
        if let Ok(d) = rx.recv_timeout(self.wait) {
            return Some(d);
        }
        if self.board.expire(&req.session_id, req.visit) {
            log::info!("session {}: gate {} timed out; auto-policy decides", req.session_id, req.visit);
            None
        } else {
            // a decision landed between the timeout and the expiry
            rx.try_recv().ok()
        }
    }
}

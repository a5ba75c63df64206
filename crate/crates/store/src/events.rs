//! Per-session event logs with live subscribers.
//!
//! Every event is appended to `sessions/<id>/events.jsonl` before it is handed
//! to subscribers. Subscribing reads the backlog after a cursor and registers
//! for live events under the same lock, so a subscriber sees each seq exactly
//! once and in order.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::sync::{Arc, Mutex};

use femagent_core::chat::{ChatMessage, Transcript, TranscriptStatus};
use femagent_core::orchestra::GateRequest;
use femagent_core::session::SessionObserver;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

use crate::store::{check_id, Store, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EventPayload {
    Message { message: ChatMessage },
    GateRequest { request: GateRequest },
    Status { status: TranscriptStatus },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub session_id: String,
    /// 1-based, contiguous within a session.
    pub seq: u64,
    pub payload: EventPayload,
}

impl SessionEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self.payload, EventPayload::Status { status } if status.is_terminal())
    }
}

#[derive(Default)]
struct SessionLog {
    /// Seq of the last persisted event; `None` until read from disk.
    last_seq: Option<u64>,
    subscribers: Vec<UnboundedSender<SessionEvent>>,
}

/// Owns event appends for every session in a store.
pub struct EventHub {
    store: Store,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionLog>>>>,
}

impl std::fmt::Debug for EventHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventHub").field("root", &self.store.root()).finish()
    }
}

impl EventHub {
    pub fn new(store: Store) -> Self {
        Self { store, sessions: Mutex::new(HashMap::new()) }
    }

    fn log(&self, session_id: &str) -> Arc<Mutex<SessionLog>> {
        let mut map = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(session_id.to_string()).or_default().clone()
    }

    fn events_path(&self, session_id: &str) -> std::path::PathBuf {
        self.store.session_dir(session_id).join("events.jsonl")
    }

    pub fn session_exists(&self, session_id: &str) -> bool {
        check_id(session_id).is_ok() && self.store.session_dir(session_id).is_dir()
    }

    /// Persisted events with `seq > cursor`. A torn last line is ignored.
    pub fn read_events(&self, session_id: &str, cursor: u64) -> Result<Vec<SessionEvent>, StoreError> {
        check_id(session_id)?;
        let path = self.events_path(session_id);
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| StoreError::Io { path: path.clone(), source: e })?;
            match serde_json::from_str::<SessionEvent>(&line) {
                Ok(ev) if ev.seq > cursor => out.push(ev),
                Ok(_) => {}
                Err(e) if e.is_eof() => break,
                Err(e) => return Err(StoreError::Corrupt(format!("{}: {e}", path.display()))),
            }
        }
        Ok(out)
    }

    /// Persists and broadcasts one event, returning it with its seq.
    pub fn append(&self, session_id: &str, payload: EventPayload) -> Result<SessionEvent, StoreError> {
        check_id(session_id)?;
        let log = self.log(session_id);
        let mut log = log.lock().unwrap_or_else(|e| e.into_inner());
        let last = match log.last_seq {
            Some(s) => s,
            None => self.read_events(session_id, 0)?.last().map_or(0, |e| e.seq),
        };
        let event = SessionEvent { session_id: session_id.to_string(), seq: last + 1, payload };
        let path = self.events_path(session_id);
        let io = |source| StoreError::Io { path: path.clone(), source };
        fs::create_dir_all(path.parent().expect("has parent")).map_err(io)?;
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        writeln!(f, "{}", serde_json::to_string(&event).expect("event serializes")).map_err(io)?;
        f.flush().map_err(io)?;
        log.last_seq = Some(event.seq);
        log.subscribers.retain(|tx| tx.send(event.clone()).is_ok());
        Ok(event)
    }

    /// Backlog after `cursor` plus a channel of every later event.
    pub fn subscribe(
        &self,
        session_id: &str,
        cursor: u64,
    ) -> Result<(Vec<SessionEvent>, UnboundedReceiver<SessionEvent>), StoreError> {
        check_id(session_id)?;
        let log = self.log(session_id);
        let mut log = log.lock().unwrap_or_else(|e| e.into_inner());
        let backlog = self.read_events(session_id, cursor)?;
        if log.last_seq.is_none() {
            log.last_seq = Some(self.read_events(session_id, 0)?.last().map_or(0, |e| e.seq));
        }
        let (tx, rx) = unbounded_channel();
        log.subscribers.push(tx);
        Ok((backlog, rx))
    }

    /// Rebuilds the transcript from the message and status events. The roster
    /// is not part of the event stream, so the caller supplies it.
    pub fn transcript(&self, session_id: &str, roster: Vec<String>) -> Result<Transcript, StoreError> {
        let mut status = TranscriptStatus::Running;
        let mut body = String::new();
        for e in self.read_events(session_id, 0)? {
            match e.payload {
                EventPayload::Message { message } => {
                    body.push_str(&serde_json::to_string(&message).expect("serializes"));
                    body.push('\n');
                }
                EventPayload::Status { status: s } => status = s,
                EventPayload::GateRequest { .. } => {}
            }
        }
        let header = serde_json::json!({ "session_id": session_id, "status": status, "roster": roster });
        let text = format!("{header}\n{body}");
        Transcript::read_jsonl(text.as_bytes()).map_err(|e| StoreError::Corrupt(format!("session {session_id}: {e}")))
    }
}

/// Forwards a session's messages and status changes into the hub.
pub struct StoreObserver {
    hub: Arc<EventHub>,
}

impl StoreObserver {
    pub fn new(hub: Arc<EventHub>) -> Self {
        Self { hub }
    }
}

impl SessionObserver for StoreObserver {
    fn on_message(&self, session_id: &str, message: &ChatMessage) {
        if let Err(e) = self.hub.append(session_id, EventPayload::Message { message: message.clone() }) {
            log::error!("session {session_id}: event not stored: {e}");
        }
    }

    fn on_status(&self, session_id: &str, status: TranscriptStatus) {
        if let Err(e) = self.hub.append(session_id, EventPayload::Status { status }) {
            log::error!("session {session_id}: status event not stored: {e}");
        }
    }
}

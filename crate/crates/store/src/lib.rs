//! Persistence and the HTTP surface.
//!
//! Runs, session events and reports live in a plain directory tree (JSON and
//! JSON Lines), so the layout doubles as the interchange format. The service
//! in [`server`] lists and launches runs, streams session events as NDJSON
//! from a seq cursor, and takes admin gate decisions over HTTP.

pub mod events;
pub mod gate;
pub mod server;
pub mod store;

pub use events::{EventHub, EventPayload, SessionEvent, StoreObserver};
pub use gate::{GateAck, GateBoard, HttpAdmin};
pub use server::{router, serve, AppState, BackgroundServer, LaunchContext, LaunchRequest, LaunchResult, RunLauncher};
pub use store::{RunKind, RunRecord, RunStatus, Store, StoreError};

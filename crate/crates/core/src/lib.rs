//! Core runtime for agentic finite-element code generation.
//!
//! The group-chat record ([`chat`]), model endpoints ([`gateway`]), the
//! sandboxed executor ([`sandbox`]) and the two orchestration loops
//! ([`duo`] and [`orchestra`]) live here. Everything above this crate
//! (dataset forge, benchmark harness, HTTP store) is built from these parts.

pub mod chat;
pub mod clock;
pub mod duo;
pub mod gateway;
pub mod orchestra;
pub mod roles;
pub mod sandbox;
pub mod session;
pub mod sync;

pub use chat::{ChatMessage, CodeBlock, MessageKind, PromptContext, Transcript, TranscriptStatus};
pub use clock::{Clock, FixedClock, SystemClock};
pub use roles::{AgentKind, AgentSpec, Role};

//! Chat-completion endpoints.
//!
//! [`ChatEndpoint`] is the only thing orchestration code talks to. Two
//! implementations ship: [`OpenAiEndpoint`] for OpenAI-compatible HTTP servers
//! and [`ScriptedEndpoint`], a deterministic double that every test uses.

mod openai;
mod scripted;
mod usage;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::chat::PromptContext;
use crate::sync::KeyedLimiter;

pub use openai::{Backoff, HttpResponse, OpenAiEndpoint, Transport, UreqTransport};
pub use scripted::{FnEndpoint, MatchRule, ScriptEntry, ScriptedEndpoint};
pub use usage::{AgentUsage, UsageLedger};

/// Default cap on concurrent requests to one base URL.
pub const DEFAULT_INFLIGHT_PER_HOST: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub content: String,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub finish_reason: FinishReason,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("prompt context is empty")]
    EmptyPrompt,
    #[error("transport failed after {attempts} attempts: {last}")]
    TransportExhausted { attempts: u32, last: String },
    #[error("endpoint rejected credentials (HTTP {status})")]
    AuthRejected { status: u16 },
    #[error("endpoint returned HTTP {status}: {message}")]
    ErrorPayload { status: u16, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("script exhausted: no unconsumed entry matches latest user message {latest:?}")]
    ScriptExhausted { latest: String },
    #[error("credential variable `{0}` is not set")]
    MissingCredential(String),
    #[error("no endpoint named `{0}`")]
    UnknownEndpoint(String),
    #[error("endpoint configuration: {0}")]
    Config(String),
}

/// Anything that turns a prompt context into an assistant reply.
pub trait ChatEndpoint: Send + Sync {
    fn complete(&self, ctx: &PromptContext) -> Result<CompletionResult, GatewayError>;
}

impl<E: ChatEndpoint + ?Sized> ChatEndpoint for Arc<E> {
    fn complete(&self, ctx: &PromptContext) -> Result<CompletionResult, GatewayError> {
        (**self).complete(ctx)
    }
}

fn default_max_output_tokens() -> u32 {
    4096
}

fn default_request_timeout() -> u64 {
    300
}

fn default_max_retries() -> u32 {
    3
}

/// One named upstream endpoint. The credential itself is never stored here,
/// only the name of the environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_ref: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    /// Seconds.
    #[serde(default = "default_request_timeout")]
    pub request_timeout: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Path to a JSON reply script; when set the endpoint is a [`ScriptedEndpoint`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            auth_ref: None,
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            request_timeout: default_request_timeout(),
            max_retries: default_max_retries(),
            script: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.script.is_none() {
            if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
                return Err(GatewayError::Config(format!("base_url `{}` is not an http(s) URL", self.base_url)));
            }
            if self.model_name.is_empty() {
                return Err(GatewayError::Config("model_name is empty".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default, Deserialize)]
struct EndpointsFile {
    #[serde(default)]
    endpoints: BTreeMap<String, EndpointConfig>,
}

/// Parses the `[endpoints.<name>]` tables of a TOML document.
pub fn parse_endpoint_configs(toml_text: &str) -> Result<BTreeMap<String, EndpointConfig>, GatewayError> {
    let file: EndpointsFile = toml::from_str(toml_text).map_err(|e| GatewayError::Config(e.to_string()))?;
    for (name, cfg) in &file.endpoints {
        cfg.validate().map_err(|e| GatewayError::Config(format!("[endpoints.{name}]: {e}")))?;
    }
    Ok(file.endpoints)
}

/// Named endpoints available to a roster.
#[derive(Clone, Default)]
pub struct EndpointRegistry {
    endpoints: BTreeMap<String, Arc<dyn ChatEndpoint>>,
}

impl fmt::Debug for EndpointRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointRegistry").field("names", &self.endpoints.keys().collect::<Vec<_>>()).finish()
    }
}

impl EndpointRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, endpoint: Arc<dyn ChatEndpoint>) -> Self {
        self.insert(name, endpoint);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, endpoint: Arc<dyn ChatEndpoint>) {
        self.endpoints.insert(name.into(), endpoint);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn ChatEndpoint>, GatewayError> {
        self.endpoints.get(name).cloned().ok_or_else(|| GatewayError::UnknownEndpoint(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.endpoints.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.endpoints.keys().map(String::as_str)
    }

    /// Builds live clients (or scripted ones) for every config. Relative
    /// script paths resolve against `base_dir`. All HTTP clients share one
    /// per-host in-flight cap.
    pub fn from_configs(
        configs: &BTreeMap<String, EndpointConfig>,
        base_dir: &Path,
        inflight_per_host: usize,
    ) -> Result<Self, GatewayError> {
        let limiter = Arc::new(KeyedLimiter::new(inflight_per_host));
        let mut reg = Self::new();
        for (name, cfg) in configs {
            let ep: Arc<dyn ChatEndpoint> = match &cfg.script {
                Some(path) => {
                    let path = if path.is_relative() { base_dir.join(path) } else { path.clone() };
                    Arc::new(ScriptedEndpoint::from_json_file(&path, cfg.max_output_tokens)?)
                }
                None => Arc::new(OpenAiEndpoint::new(cfg.clone(), Arc::new(UreqTransport::new()), limiter.clone())),
            };
            reg.insert(name.clone(), ep);
        }
        Ok(reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_endpoint_tables() {
        let cfgs = parse_endpoint_configs(
            r#"
            [endpoints.local]
            base_url = "http://127.0.0.1:11434/v1"
            model_name = "fenics-coder"
            max_output_tokens = 2048

            [endpoints.hosted]
            base_url = "https://api.example.com/v1"
            model_name = "large"
            auth_ref = "EXAMPLE_API_KEY"
            temperature = 0.2
            "#,
        )
        .unwrap();
        assert_eq!(cfgs.len(), 2);
        let local = &cfgs["local"];
        assert_eq!(local.temperature, 0.0);
        assert_eq!(local.max_output_tokens, 2048);
        assert_eq!(local.max_retries, 3);
        assert_eq!(cfgs["hosted"].auth_ref.as_deref(), Some("EXAMPLE_API_KEY"));
    }

    #[test]
    fn rejects_negative_temperature_and_inline_keys() {
        let bad = "[endpoints.x]\nbase_url = \"http://h/v1\"\nmodel_name = \"m\"\ntemperature = -1.0\n";
        assert!(parse_endpoint_configs(bad).is_err());
        let inline_key = "[endpoints.x]\nbase_url = \"http://h/v1\"\nmodel_name = \"m\"\napi_key = \"sk-123\"\n";
        assert!(parse_endpoint_configs(inline_key).is_err());
    }

    #[test]
    fn unknown_endpoint_is_an_error() {
        let reg = EndpointRegistry::new();
        assert!(matches!(reg.get("nope"), Err(GatewayError::UnknownEndpoint(_))));
    }
}

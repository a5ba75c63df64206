use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde_json::{json, Value};

use super::{ChatEndpoint, CompletionResult, EndpointConfig, FinishReason, GatewayError};
use crate::chat::{estimate_tokens, PromptContext};
use crate::sync::KeyedLimiter;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Sends one JSON POST. `Err` means no HTTP response was received.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, String>;
}

#[derive(Debug, Clone)]
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl UreqTransport {
    pub fn new() -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, String> {
        let mut req = self.agent.post(url).config().timeout_global(Some(timeout)).build();
        if let Some(token) = bearer {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Exponential backoff with symmetric multiplicative jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { base: Duration::from_secs(1), factor: 2.0, jitter: 0.2 }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based).
    pub fn delay<R: Rng + ?Sized>(&self, retry: u32, rng: &mut R) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        let j = if self.jitter > 0.0 { rng.random_range(-self.jitter..=self.jitter) } else { 0.0 };
        Duration::from_secs_f64((nominal * (1.0 + j)).max(0.0))
    }
}

/// Client for servers speaking the OpenAI chat-completions convention.
pub struct OpenAiEndpoint {
    config: EndpointConfig,
    transport: Arc<dyn Transport>,
    limiter: Arc<KeyedLimiter>,
    backoff: Backoff,
}

impl std::fmt::Debug for OpenAiEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiEndpoint").field("config", &self.config).field("backoff", &self.backoff).finish()
    }
}

impl OpenAiEndpoint {
    pub fn new(config: EndpointConfig, transport: Arc<dyn Transport>, limiter: Arc<KeyedLimiter>) -> Self {
        Self { config, transport, limiter, backoff: Backoff::default() }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn request_body(&self, ctx: &PromptContext) -> Value {
        json!({
            "model": self.config.model_name,
            "messages": ctx.messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
            "stream": false,
        })
    }
}

fn error_message(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let err = v.get("error")?;
    Some(match err.get("message").and_then(Value::as_str) {
        Some(m) => m.to_string(),
        None => err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string()),
    })
}

fn parse_completion(body: &str, ctx: &PromptContext) -> Result<CompletionResult, GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(format!("not JSON: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0]".into()))?;
    let message =
        choice.get("message").ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message".into()))?;
    let content = match message.get("content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(other) => return Err(GatewayError::MalformedResponse(format!("content is not a string: {other}"))),
    };
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        None | Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    let usage = v.get("usage");
    let field = |k: &str| usage.and_then(|u| u.get(k)).and_then(Value::as_u64);
    Ok(CompletionResult {
        prompt_tokens: field("prompt_tokens").unwrap_or(ctx.estimated_tokens() as u64),
        output_tokens: field("completion_tokens").unwrap_or(estimate_tokens(&content) as u64),
        content,
        finish_reason,
    })
}

impl ChatEndpoint for OpenAiEndpoint {
    fn complete(&self, ctx: &PromptContext) -> Result<CompletionResult, GatewayError> {
        if ctx.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let token = match &self.config.auth_ref {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingCredential(var.clone()))?),
            None => None,
        };
        let url = self.url();
        let body = self.request_body(ctx);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.backoff.delay(attempt - 1, &mut rand::rng()));
            }
            let outcome = {
                let _permit = self.limiter.acquire(&self.config.base_url);
                self.transport.post_json(&url, token.as_deref(), &body, self.config.timeout())
            };
            match outcome {
                Err(e) => {
                    log::warn!("{url}: attempt {} of {attempts} failed: {e}", attempt + 1);
                    last = e;
                }
                Ok(r) if (200..300).contains(&r.status) => return parse_completion(&r.body, ctx),
                Ok(r) if r.status == 401 || r.status == 403 => {
                    return Err(GatewayError::AuthRejected { status: r.status })
                }
                Ok(r) if r.status == 429 || r.status >= 500 => {
                    log::warn!("{url}: attempt {} of {attempts} got HTTP {}", attempt + 1, r.status);
                    last = format!("HTTP {}", r.status);
                }
                Ok(r) => {
                    let message = error_message(&r.body).unwrap_or_else(|| r.body.chars().take(200).collect());
                    return Err(GatewayError::ErrorPayload { status: r.status, message });
                }
            }
        }
        Err(GatewayError::TransportExhausted { attempts, last })
    }
}

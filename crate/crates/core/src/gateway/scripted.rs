use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatEndpoint, CompletionResult, FinishReason, GatewayError};
use crate::chat::{estimate_tokens, PromptContext};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchRule {
    Any,
    /// Substring of the latest user message.
    Contains(String),
}

impl MatchRule {
    fn matches(&self, latest: &str) -> bool {
        match self {
            MatchRule::Any => true,
            MatchRule::Contains(s) => latest.contains(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub rule: MatchRule,
    pub reply: String,
    pub finish_reason: FinishReason,
}

#[derive(Deserialize)]
struct ScriptEntryFile {
    #[serde(default, rename = "match")]
    pattern: Option<String>,
    reply: String,
    #[serde(default)]
    finish_reason: Option<FinishReason>,
}

#[derive(Debug, Default)]
struct ScriptState {
    entries: Vec<(ScriptEntry, bool)>,
    calls: Vec<PromptContext>,
}

/// Replies from a fixed script. Each entry is used at most once; a call picks
/// the first unconsumed entry whose rule matches the latest user message.
#[derive(Debug)]
pub struct ScriptedEndpoint {
    state: Mutex<ScriptState>,
    max_output_tokens: u32,
}

impl Default for ScriptedEndpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl ScriptedEndpoint {
    pub fn new() -> Self {
        Self { state: Mutex::new(ScriptState::default()), max_output_tokens: 4096 }
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn push(self, entry: ScriptEntry) -> Self {
        self.lock().entries.push((entry, false));
        self
    }

    /// Wildcard entry finishing with `stop`.
    pub fn reply(self, text: impl Into<String>) -> Self {
        self.push(ScriptEntry { rule: MatchRule::Any, reply: text.into(), finish_reason: FinishReason::Stop })
    }

    pub fn reply_when(self, needle: impl Into<String>, text: impl Into<String>) -> Self {
        self.push(ScriptEntry {
            rule: MatchRule::Contains(needle.into()),
            reply: text.into(),
            finish_reason: FinishReason::Stop,
        })
    }

    pub fn reply_with(self, text: impl Into<String>, finish_reason: FinishReason) -> Self {
        self.push(ScriptEntry { rule: MatchRule::Any, reply: text.into(), finish_reason })
    }

    /// Loads a JSON array of `{"match": <substring or null>, "reply": <text>, "finish_reason": ...}`.
    pub fn from_json_file(path: &Path, max_output_tokens: u32) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading script {}: {e}", path.display())))?;
        Self::from_json_str(&text, max_output_tokens)
    }

    pub fn from_json_str(text: &str, max_output_tokens: u32) -> Result<Self, GatewayError> {
        let raw: Vec<ScriptEntryFile> =
            serde_json::from_str(text).map_err(|e| GatewayError::Config(format!("reply script: {e}")))?;
        let mut ep = Self::new().with_max_output_tokens(max_output_tokens);
        for r in raw {
            ep = ep.push(ScriptEntry {
                rule: r.pattern.map_or(MatchRule::Any, MatchRule::Contains),
                reply: r.reply,
                finish_reason: r.finish_reason.unwrap_or(FinishReason::Stop),
            });
        }
        Ok(ep)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ScriptState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn remaining(&self) -> usize {
        self.lock().entries.iter().filter(|(_, used)| !used).count()
    }

    /// Every prompt context this endpoint has been called with, in order.
    pub fn calls(&self) -> Vec<PromptContext> {
        self.lock().calls.clone()
    }

    pub fn call_count(&self) -> usize {
        self.lock().calls.len()
    }
}

impl ChatEndpoint for ScriptedEndpoint {
    fn complete(&self, ctx: &PromptContext) -> Result<CompletionResult, GatewayError> {
        if ctx.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let latest = ctx.latest_user_message().unwrap_or("");
        let mut st = self.lock();
        st.calls.push(ctx.clone());
        let Some((entry, used)) = st.entries.iter_mut().find(|(e, used)| !*used && e.rule.matches(latest)) else {
            return Err(GatewayError::ScriptExhausted { latest: latest.chars().take(120).collect() });
        };
        *used = true;
        let output_tokens = match entry.finish_reason {
            FinishReason::Length => u64::from(self.max_output_tokens),
            _ => estimate_tokens(&entry.reply) as u64,
        };
        Ok(CompletionResult {
            content: entry.reply.clone(),
            prompt_tokens: ctx.estimated_tokens() as u64,
            output_tokens,
            finish_reason: entry.finish_reason,
        })
    }
}

type Responder = dyn Fn(&PromptContext) -> Result<CompletionResult, GatewayError> + Send + Sync;

/// An endpoint backed by a closure. Useful when replies depend on the prompt
/// in ways a fixed script cannot express.
pub struct FnEndpoint {
    f: Box<Responder>,
}

impl FnEndpoint {
    pub fn new(f: impl Fn(&PromptContext) -> Result<CompletionResult, GatewayError> + Send + Sync + 'static) -> Self {
        Self { f: Box::new(f) }
    }

    /// Closure returns only the reply text; usage is estimated and finish is `stop`.
    pub fn text(f: impl Fn(&PromptContext) -> String + Send + Sync + 'static) -> Self {
        Self::new(move |ctx| {
            let content = f(ctx);
            Ok(CompletionResult {
                prompt_tokens: ctx.estimated_tokens() as u64,
                output_tokens: estimate_tokens(&content) as u64,
                content,
                finish_reason: FinishReason::Stop,
            })
        })
    }
}

impl std::fmt::Debug for FnEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("FnEndpoint")
    }
}

impl ChatEndpoint for FnEndpoint {
    fn complete(&self, ctx: &PromptContext) -> Result<CompletionResult, GatewayError> {
        if ctx.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        (self.f)(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(user: &str) -> PromptContext {
        let mut c = PromptContext::with_system("sys");
        c.push_user(user);
        c
    }

    #[test]
    fn wildcard_passthrough() {
        let ep = ScriptedEndpoint::new().reply("OK");
        let r = ep.complete(&ctx("anything")).unwrap();
        assert_eq!(r.content, "OK");
        assert_eq!(r.finish_reason, FinishReason::Stop);
    }

    #[test]
    fn exhausted_script_errors() {
        let ep = ScriptedEndpoint::new();
        assert!(matches!(ep.complete(&ctx("x")), Err(GatewayError::ScriptExhausted { .. })));
        let ep = ScriptedEndpoint::new().reply("once");
        ep.complete(&ctx("x")).unwrap();
        assert!(matches!(ep.complete(&ctx("x")), Err(GatewayError::ScriptExhausted { .. })));
    }

    #[test]
    fn substring_rules_skip_non_matching_entries() {
        let ep = ScriptedEndpoint::new().reply_when("Traceback", "fixed").reply("first");
        assert_eq!(ep.complete(&ctx("solve it")).unwrap().content, "first");
        assert_eq!(ep.complete(&ctx("Traceback (most recent call last)")).unwrap().content, "fixed");
        assert_eq!(ep.remaining(), 0);
    }

    #[test]
    fn length_finish_reports_the_cap() {
        let ep = ScriptedEndpoint::new().with_max_output_tokens(77).reply_with("trunc", FinishReason::Length);
        assert_eq!(ep.complete(&ctx("x")).unwrap().output_tokens, 77);
    }

    #[test]
    fn does_not_mutate_context_and_logs_calls() {
        let ep = ScriptedEndpoint::new().reply("a");
        let c = ctx("p");
        let before = c.clone();
        ep.complete(&c).unwrap();
        assert_eq!(c, before);
        assert_eq!(ep.calls(), vec![before]);
    }

    #[test]
    fn json_script() {
        let ep = ScriptedEndpoint::from_json_str(
            r#"[{"match":"fix","reply":"b"},{"reply":"a"},{"reply":"c","finish_reason":"length"}]"#,
            10,
        )
        .unwrap();
        assert_eq!(ep.complete(&ctx("go")).unwrap().content, "a");
        assert_eq!(ep.complete(&ctx("please fix")).unwrap().content, "b");
        assert_eq!(ep.complete(&ctx("go")).unwrap().finish_reason, FinishReason::Length);
    }

    #[test]
    fn empty_context_is_rejected() {
        let ep = ScriptedEndpoint::new().reply("a");
        assert!(matches!(ep.complete(&PromptContext::default()), Err(GatewayError::EmptyPrompt)));
    }
}

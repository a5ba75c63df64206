//! Stage prompt templates. Templates live in `prompts/<version>/` and use
//! `{name}` placeholders.

use femagent_core::chat::{PromptMessage, PromptRole};
use femagent_core::PromptContext;

pub const PROMPT_VERSION: &str = "v1";

pub const SYSTEM: &str = include_str!("../prompts/v1/system.txt");
pub const PROBLEM_GEN: &str = include_str!("../prompts/v1/problem_gen.txt");
pub const VARIANT_GEOMETRY: &str = include_str!("../prompts/v1/variant_geometry.txt");
pub const VARIANT_BOUNDARY: &str = include_str!("../prompts/v1/variant_boundary.txt");
pub const CODE_GEN: &str = include_str!("../prompts/v1/code_gen.txt");
pub const CODE_REASK: &str = include_str!("../prompts/v1/code_reask.txt");
pub const CORRECTION: &str = include_str!("../prompts/v1/correction.txt");
pub const INSTRUCTION_GEN: &str = include_str!("../prompts/v1/instruction_gen.txt");
pub const INSTRUCTION_REASK: &str = include_str!("../prompts/v1/instruction_reask.txt");

/// Substitutes every `{key}` in one pass, so values containing braces are left alone.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out.trim_end().to_string()
}

/// System prompt plus one user message.
pub fn context(user: String) -> PromptContext {
    let mut ctx = PromptContext::with_system(SYSTEM.trim());
    ctx.push_user(user);
    ctx
}

/// Appends the assistant's previous reply and a follow-up request.
pub fn follow_up(ctx: &mut PromptContext, reply: &str, request: &str) {
    ctx.messages.push(PromptMessage { role: PromptRole::Assistant, name: None, content: reply.to_string() });
    ctx.push_user(request.trim());
}

//! Deterministic stand-ins for the generation endpoints.
//!
//! They read the structure the stage prompts ask for (numbered headings,
//! problem ids, fenced scripts) and answer in the expected layout, so the
//! whole pipeline can be dry-run without a model. Statements embed their
//! headings, which keeps every variant unique.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use femagent_core::chat::extract_fenced;
use femagent_core::gateway::FnEndpoint;
use femagent_core::sandbox::{CodeRunner, ExecutionReport, ExitStatus};
use femagent_core::{CodeBlock, PromptContext};

use crate::pipeline::ForgeEndpoints;
use crate::stages::Lineage;

fn prompt(ctx: &PromptContext) -> &str {
    ctx.latest_user_message().unwrap_or_default()
}

/// `(number, label)` for each `### <word> <n> (<label>)` heading in the prompt.
fn requested(text: &str, word: &str) -> Vec<(usize, String)> {
    let prefix = format!("### {word} ");
    text.lines()
        .filter_map(|l| {
            let rest = l.strip_prefix(&prefix)?;
            let (num, label) = rest.split_once(' ')?;
            let label = label.strip_prefix('(')?.strip_suffix(')')?;
            Some((num.parse().ok()?, label.to_string()))
        })
        .collect()
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let Some(i) = text.find(start) else { return "" };
    let rest = &text[i + start.len()..];
    rest.find(end).map_or(rest, |j| &rest[..j]).trim()
}

fn field_line<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(label)).map(str::trim)
}

/// Answers problem-generation prompts with one statement per requested heading.
pub fn problem_endpoint() -> FnEndpoint {
    FnEndpoint::text(|ctx| {
        requested(prompt(ctx), "Problem")
            .into_iter()
            .map(|(i, label)| {
                let family = label.strip_prefix("Family: ").unwrap_or(&label);
                format!(
                    "### Problem {i}\nFamily: {family}\nSynthetic {family} problem {i} on the unit square, \
                     discretised with first-order Lagrange elements on a 32 by 32 mesh. Report the maximum of the solution.\n"
                )
            })
            .collect()
    })
}

/// Answers variant prompts on either axis by appending each heading label to the parent statement.
pub fn variant_endpoint() -> FnEndpoint {
    FnEndpoint::text(|ctx| {
        let text = prompt(ctx);
        let parent = between(text, ":\n\n", "\n\nRewrite");
        requested(text, "Variant")
            .into_iter()
            .map(|(i, label)| format!("### Variant {i}\n{parent}\n{label}.\n"))
            .collect()
    })
}

/// Answers code prompts with `script(lineage, statement)` in a fenced block.
pub fn code_endpoint(script: impl Fn(Option<Lineage>, &str) -> String + Send + Sync + 'static) -> FnEndpoint {
    FnEndpoint::text(move |ctx| {
        let text = prompt(ctx);
        let lineage = field_line(text, "Problem id:").and_then(|s| s.parse().ok());
        let statement = between(text, "\n\n", "\n\nWrite one complete");
        format!("```python\n{}\n```", script(lineage, statement).trim_end())
    })
}

/// A script that prints its lineage and exits cleanly.
pub fn placeholder_script(lineage: Option<Lineage>, _statement: &str) -> String {
    let id = lineage.map_or_else(|| "unknown".to_string(), |l| l.to_string());
    format!("# offline placeholder for {id}\nprint(\"lineage = {id}\")")
}

/// Answers correction prompts with `fix(failed_script)` in a fenced block.
pub fn correction_endpoint(fix: impl Fn(&str) -> String + Send + Sync + 'static) -> FnEndpoint {
    FnEndpoint::text(move |ctx| {
        let failed = extract_fenced(prompt(ctx)).into_iter().next().map(|b| b.source).unwrap_or_default();
        format!("```python\n{}\n```", fix(&failed).trim_end())
    })
}

/// Answers record prompts with an instruction and the problem statement as input.
pub fn instruction_endpoint() -> FnEndpoint {
    FnEndpoint::text(|ctx| {
        let statement = between(prompt(ctx), "Problem:\n", "\n\nScript:");
        format!("Instruction: Write a legacy FEniCS script that solves the problem described in the input.\nInput: {statement}")
    })
}

/// All five stages offline. Scripts are [`placeholder_script`]; corrections return the script unchanged.
pub fn endpoints() -> ForgeEndpoints {
    ForgeEndpoints {
        problem_gen: Arc::new(problem_endpoint()),
        variant_gen: Arc::new(variant_endpoint()),
        code_gen: Arc::new(code_endpoint(placeholder_script)),
        correction: Arc::new(correction_endpoint(str::to_string)),
        instruction_gen: Arc::new(instruction_endpoint()),
    }
}

/// A runner that executes nothing: scripts containing any of the markers
/// exit with code 1, all others succeed.
#[derive(Debug, Default)]
pub struct MarkerRunner {
    markers: Vec<String>,
    runs: AtomicUsize,
}

impl MarkerRunner {
    pub fn new<S: Into<String>>(markers: impl IntoIterator<Item = S>) -> Self {
        Self { markers: markers.into_iter().map(Into::into).collect(), runs: AtomicUsize::new(0) }
    }

    /// Executions so far.
    pub fn runs(&self) -> usize {
        self.runs.load(Ordering::SeqCst)
    }
}

impl CodeRunner for MarkerRunner {
    fn run(&self, code: &CodeBlock) -> ExecutionReport {
        self.runs.fetch_add(1, Ordering::SeqCst);
        let mut report = ExecutionReport::spawn_failure("");
        match self.markers.iter().find(|m| code.source.contains(m.as_str())) {
            Some(m) => {
                report.exit_status = ExitStatus::Nonzero { code: 1 };
                report.stderr = format!("RuntimeError: script contains {m}\n");
            }
            None => {
                report.exit_status = ExitStatus::Success;
                report.stdout = code.source.lines().next().unwrap_or_default().to_string();
            }
        }
        report
    }
}

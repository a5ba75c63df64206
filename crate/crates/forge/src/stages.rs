//! The generation stages, one completion (plus at most one retry) each.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use femagent_core::chat::extract_fenced;
use femagent_core::gateway::{ChatEndpoint, GatewayError};
use femagent_core::sandbox::{CodeRunner, ExecutionReport, ExitStatus};
use femagent_core::{CodeBlock, PromptContext};
use serde::{Deserialize, Serialize};

use crate::prompts::{self, render};
use crate::record::AlpacaRecord;
use crate::retrieve::{render_snippets, retrieve};
use crate::seed::SeedCorpus;
use crate::vocab::{boundary_plan, geometry_plan, BoundaryDescriptor, DomainDescriptor, PdeFamily, VocabularyTooSmall};

/// Snippet lines kept per retrieved program.
const SNIPPET_LINES: usize = 40;
/// Stderr characters shown to the correction endpoint.
const CORRECTION_STDERR_CHARS: usize = 4000;

/// Position in the generation tree: `p03`, `p03-g07`, `p03-g07-b02`. Ids are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Lineage {
    pub problem: u32,
    pub geometry: Option<u32>,
    pub boundary: Option<u32>,
}

impl Lineage {
    pub fn root(problem: u32) -> Self {
        Self { problem, geometry: None, boundary: None }
    }

    pub fn leaf(problem: u32, geometry: u32, boundary: u32) -> Self {
        Self { problem, geometry: Some(geometry), boundary: Some(boundary) }
    }

    /// 1 for drafts, 2 for geometry variants, 3 for complete variants.
    pub fn depth(&self) -> usize {
        1 + self.geometry.is_some() as usize + self.boundary.is_some() as usize
    }

    pub fn is_complete(&self) -> bool {
        self.depth() == 3
    }

    pub fn child(&self, axis: VariantAxis, id: u32) -> Option<Self> {
        match (axis, self.geometry, self.boundary) {
            (VariantAxis::Geometry, None, None) => Some(Self { geometry: Some(id), ..*self }),
            (VariantAxis::Boundary, Some(_), None) => Some(Self { boundary: Some(id), ..*self }),
            _ => None,
        }
    }

    pub fn parent(&self) -> Option<Self> {
        match (self.geometry, self.boundary) {
            (_, Some(_)) => Some(Self { boundary: None, ..*self }),
            (Some(_), None) => Some(Self::root(self.problem)),
            (None, None) => None,
        }
    }
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{:02}", self.problem)?;
        if let Some(g) = self.geometry {
            write!(f, "-g{g:02}")?;
        }
        if let Some(b) = self.boundary {
            write!(f, "-b{b:02}")?;
        }
        Ok(())
    }
}

impl FromStr for Lineage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed lineage id `{s}`");
        let mut parts = s.split('-');
        let num = |p: Option<&str>, prefix: char| -> Result<Option<u32>, String> {
            match p {
                None => Ok(None),
                Some(p) => p.strip_prefix(prefix).and_then(|n| n.parse().ok()).map(Some).ok_or_else(bad),
            }
        };
        let problem = num(parts.next(), 'p')?.ok_or_else(bad)?;
        let geometry = num(parts.next(), 'g')?;
        let boundary = num(parts.next(), 'b')?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { problem, geometry, boundary })
    }
}

impl TryFrom<String> for Lineage {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Lineage> for String {
    fn from(l: Lineage) -> String {
        l.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantAxis {
    Geometry,
    Boundary,
}

/// A node of the generation tree. Drafts have depth 1, geometry variants
/// depth 2, and complete variants (both axes resolved) depth 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub lineage: Lineage,
    pub family: PdeFamily,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundaryDescriptor>,
}

pub type ProblemDraft = VariantSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VetStatus {
    Unvetted,
    Passed,
    CorrectedPassed,
    Discarded,
}

impl VetStatus {
    pub fn is_kept(self) -> bool {
        matches!(self, VetStatus::Passed | VetStatus::CorrectedPassed)
    }
}

impl fmt::Display for VetStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VetStatus::Unvetted => "unvetted",
            VetStatus::Passed => "passed",
            VetStatus::CorrectedPassed => "corrected-passed",
            VetStatus::Discarded => "discarded",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeCandidate {
    pub lineage: Lineage,
    pub family: PdeFamily,
    pub statement: String,
    /// The current script: the corrected one after a successful correction.
    pub source: String,
    pub vet_status: VetStatus,
    /// Executions performed; never more than two.
    pub attempts: u32,
    pub reports: Vec<ExecutionReport>,
    /// The generated script, kept when a correction replaced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_source: Option<String>,
    /// Why vetting stopped early, when it did.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CodeCandidate {
    pub fn new(variant: &VariantSpec, source: impl Into<String>) -> Self {
        Self {
            lineage: variant.lineage,
            family: variant.family,
            statement: variant.statement.clone(),
            source: source.into(),
            vet_status: VetStatus::Unvetted,
            attempts: 0,
            reports: Vec::new(),
            initial_source: None,
            note: None,
        }
    }

    /// Checks the status against the execution history.
    pub fn check_invariants(&self) -> Result<(), String> {
        let ok: Vec<bool> = self.reports.iter().map(ExecutionReport::is_success).collect();
        if self.attempts as usize != ok.len() || self.attempts > 2 {
            return Err(format!("{}: {} attempts with {} reports", self.lineage, self.attempts, ok.len()));
        }
        let fine = match self.vet_status {
            VetStatus::Unvetted => ok.is_empty(),
            VetStatus::Passed => ok == [true],
            VetStatus::CorrectedPassed => ok == [false, true] && self.initial_source.is_some(),
            // a single failed run is allowed when the correction produced no script
            VetStatus::Discarded => ok == [false, false] || (ok == [false] && self.note.is_some()),
        };
        if fine {
            Ok(())
        } else {
            Err(format!("{}: status {} inconsistent with runs {ok:?}", self.lineage, self.vet_status))
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error("{stage}: expected {expected} sections, parsed {got} after one retry")]
    ShortOutput { stage: &'static str, expected: usize, got: usize },
    #[error("{lineage}: reply contained no code block after a re-ask")]
    NoCodeBlock { lineage: Lineage },
    #[error("{lineage}: reply lacked an instruction or input field after one retry")]
    MalformedGeneration { lineage: Lineage },
    #[error("{lineage}: only passing candidates become records (status is {status})")]
    Precondition { lineage: Lineage, status: VetStatus },
    #[error("{lineage}: {reason}")]
    BadParent { lineage: Lineage, reason: String },
    #[error(transparent)]
    Vocabulary(#[from] VocabularyTooSmall),
    #[error("{stage}: {source}")]
    Gateway { stage: &'static str, source: GatewayError },
}

fn complete(endpoint: &dyn ChatEndpoint, ctx: &PromptContext, stage: &'static str) -> Result<String, StageError> {
    endpoint.complete(ctx).map(|r| r.content).map_err(|source| StageError::Gateway { stage, source })
}

/// Bodies of `### <word> <n>` sections keyed by `n`. The heading may carry
/// trailing text such as `(Family: ...)`; the first section with a given number wins.
pub fn parse_sections(text: &str, word: &str) -> BTreeMap<usize, String> {
    let mut out: BTreeMap<usize, String> = BTreeMap::new();
    let mut current: Option<(usize, Vec<&str>)> = None;
    let flush = |cur: Option<(usize, Vec<&str>)>, out: &mut BTreeMap<usize, String>| {
        if let Some((n, body)) = cur {
            out.entry(n).or_insert_with(|| body.join("\n").trim().to_string());
        }
    };
    for line in text.lines() {
        if let Some(n) = heading_number(line, word) {
            flush(current.take(), &mut out);
            current = Some((n, Vec::new()));
        } else if let Some((_, body)) = current.as_mut() {
            body.push(line);
        }
    }
    flush(current, &mut out);
    out
}

fn heading_number(line: &str, word: &str) -> Option<usize> {
    let t = line.trim_start();
    if !t.starts_with('#') {
        return None;
    }
    let t = t.trim_start_matches('#').trim_start().trim_start_matches('*');
    let head = t.get(..word.len())?;
    if !head.eq_ignore_ascii_case(word) {
        return None;
    }
    let digits: String = t[word.len()..].trim_start().chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok()
}

/// Splits a leading `Family:` line off a draft body.
fn split_family(body: &str) -> (Option<PdeFamily>, String) {
    let mut lines = body.lines().skip_while(|l| l.trim().is_empty()).peekable();
    let family = lines.peek().and_then(|l| {
        let l = l.trim().trim_start_matches('*');
        let rest = l.get(..7).filter(|h| h.eq_ignore_ascii_case("family:")).map(|_| &l[7..])?;
        rest.trim_matches(|c: char| c == '*' || c.is_whitespace()).parse().ok()
    });
    if family.is_some() {
        lines.next();
    }
    (family, lines.collect::<Vec<_>>().join("\n").trim().to_string())
}

fn headings(word: &str, labels: &[String]) -> String {
    labels.iter().enumerate().map(|(i, l)| format!("### {word} {} ({l})", i + 1)).collect::<Vec<_>>().join("\n")
}

/// Asks once, retries once on a short reply, and returns the first `count` sections.
fn ask_sections(
    endpoint: &dyn ChatEndpoint,
    ctx: &PromptContext,
    word: &str,
    count: usize,
    stage: &'static str,
) -> Result<Vec<String>, StageError> {
    let mut got = 0;
    for _ in 0..2 {
        let reply = complete(endpoint, ctx, stage)?;
        let sections = parse_sections(&reply, word);
        let bodies: Vec<String> =
            (1..=count).map_while(|i| sections.get(&i).filter(|b| !b.is_empty()).cloned()).collect();
        if bodies.len() == count {
            return Ok(bodies);
        }
        got = bodies.len();
        log::warn!("{stage}: parsed {got} of {count} sections");
    }
    Err(StageError::ShortOutput { stage, expected: count, got })
}

/// `n` new problem statements, one per assigned PDE family, grounded in
/// retrieved seed examples.
pub fn gen_problem_drafts(
    endpoint: &dyn ChatEndpoint,
    corpus: &SeedCorpus,
    n: usize,
    retrieval_k: usize,
) -> Result<Vec<ProblemDraft>, StageError> {
    let plan = PdeFamily::plan(n);
    let mut query = plan.iter().map(|f| f.label()).collect::<Vec<_>>().join(" ");
    query.push_str(" finite element FEniCS");
    let hits = retrieve(corpus, &query, retrieval_k);
    let labels: Vec<String> = plan.iter().map(|f| format!("Family: {f}")).collect();
    let ctx = prompts::context(render(
        prompts::PROBLEM_GEN,
        &[
            ("context", render_snippets(&hits, SNIPPET_LINES).trim_end()),
            ("n", &n.to_string()),
            ("headings", &headings("Problem", &labels)),
        ],
    ));
    let bodies = ask_sections(endpoint, &ctx, "Problem", n, "problem-gen")?;
    Ok(bodies
        .into_iter()
        .zip(plan)
        .enumerate()
        .map(|(i, (body, planned))| {
            let (family, statement) = split_family(&body);
            VariantSpec {
                lineage: Lineage::root(i as u32 + 1),
                family: family.unwrap_or(planned),
                statement: if statement.is_empty() { body } else { statement },
                domain: None,
                boundary: None,
            }
        })
        .collect())
}

/// `count` children of `parent` along one axis. Domains and boundary
/// assignments come from the seeded vocabulary plans; the endpoint rewrites
/// the statement for each.
pub fn gen_variants(
    endpoint: &dyn ChatEndpoint,
    parent: &VariantSpec,
    axis: VariantAxis,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<VariantSpec>, StageError> {
    let bad = |reason: &str| StageError::BadParent { lineage: parent.lineage, reason: reason.into() };
    if parent.lineage.child(axis, 1).is_none() {
        return Err(bad(&format!("cannot add a {axis:?} variant at depth {}", parent.lineage.depth())));
    }
    if count == 0 {
        return Err(bad("variant count must be at least 1"));
    }
    let key = parent.lineage.to_string();
    let (template, labels, domains, boundaries) = match axis {
        VariantAxis::Geometry => {
            let plan = geometry_plan(count, rng_seed, &key)?;
            let labels = plan.iter().map(|d| format!("Domain: {d}")).collect::<Vec<_>>();
            (prompts::VARIANT_GEOMETRY, labels, plan.into_iter().map(Some).collect(), vec![parent.boundary; count])
        }
        VariantAxis::Boundary => {
            let plan = boundary_plan(count, rng_seed, &key)?;
            let labels = plan.iter().map(|b| format!("Boundary conditions: {b}")).collect::<Vec<_>>();
            (prompts::VARIANT_BOUNDARY, labels, vec![parent.domain; count], plan.into_iter().map(Some).collect())
        }
    };
    let ctx = prompts::context(render(
        template,
        &[("parent", &key), ("statement", parent.statement.trim()), ("headings", &headings("Variant", &labels))],
    ));
    let stage = match axis {
        VariantAxis::Geometry => "variant-gen (geometry)",
        VariantAxis::Boundary => "variant-gen (boundary)",
    };
    let bodies = ask_sections(endpoint, &ctx, "Variant", count, stage)?;
    Ok(bodies
        .into_iter()
        .enumerate()
        .map(|(i, statement)| VariantSpec {
            lineage: parent.lineage.child(axis, i as u32 + 1).expect("checked above"),
            family: parent.family,
            statement,
            domain: domains[i],
            boundary: boundaries[i],
        })
        .collect())
}

/// One script for a complete variant, with a single re-ask when the reply has no fenced block.
pub fn synthesize_code(endpoint: &dyn ChatEndpoint, variant: &VariantSpec) -> Result<CodeCandidate, StageError> {
    if !variant.lineage.is_complete() {
        return Err(StageError::BadParent { lineage: variant.lineage, reason: "variant has unresolved axes".into() });
    }
    let lineage = variant.lineage.to_string();
    let mut ctx =
        prompts::context(render(prompts::CODE_GEN, &[("lineage", &lineage), ("statement", variant.statement.trim())]));
    for attempt in 0..2 {
        let reply = complete(endpoint, &ctx, "code-gen")?;
        if let Some(block) = extract_fenced(&reply).pop() {
            return Ok(CodeCandidate::new(variant, block.source));
        }
        if attempt == 0 {
            prompts::follow_up(&mut ctx, &reply, prompts::CODE_REASK);
        }
    }
    Err(StageError::NoCodeBlock { lineage: variant.lineage })
}

fn tail_chars(s: &str, n: usize) -> &str {
    match s.char_indices().rev().nth(n.saturating_sub(1)) {
        Some((i, _)) if n > 0 => &s[i..],
        _ => s,
    }
}

fn status_line(r: &ExecutionReport) -> String {
    match &r.exit_status {
        ExitStatus::Success => "exit code 0".into(),
        ExitStatus::Nonzero { code } => format!("exit code {code}"),
        ExitStatus::Timeout => "killed after exceeding the wall-clock limit".into(),
        ExitStatus::SpawnFailure { message } => format!("could not start: {message}"),
    }
}

/// Execute, and on failure ask for one correction and execute again.
/// Outcomes are statuses; a candidate that is not unvetted is returned unchanged.
pub fn vet_candidate(
    mut candidate: CodeCandidate,
    runner: &dyn CodeRunner,
    correction: &dyn ChatEndpoint,
) -> CodeCandidate {
    if candidate.vet_status != VetStatus::Unvetted {
        log::warn!("{}: already vetted ({}), not executing again", candidate.lineage, candidate.vet_status);
        return candidate;
    }
    let first = runner.run(&CodeBlock::new(candidate.source.clone()));
    candidate.attempts = 1;
    let passed = first.is_success();
    candidate.reports.push(first);
    if passed {
        candidate.vet_status = VetStatus::Passed;
        return candidate;
    }

    let report = &candidate.reports[0];
    let stderr = if report.stderr.trim().is_empty() { &report.stdout } else { &report.stderr };
    let ctx = prompts::context(render(
        prompts::CORRECTION,
        &[
            ("lineage", &candidate.lineage.to_string()),
            ("statement", candidate.statement.trim()),
            ("code", candidate.source.trim_end()),
            ("status", &status_line(report)),
            ("stderr", tail_chars(stderr, CORRECTION_STDERR_CHARS).trim_end()),
        ],
    ));
    let fixed = match correction.complete(&ctx) {
        Ok(reply) => match extract_fenced(&reply.content).pop() {
            Some(block) => Some(block.source),
            // an unfenced reply is taken as the script itself
            None if !reply.content.trim().is_empty() => Some(reply.content.trim().to_string()),
            None => None,
        },
        Err(e) => {
            candidate.note = Some(format!("correction unavailable: {e}"));
            None
        }
    };
    let Some(fixed) = fixed else {
        candidate.note.get_or_insert_with(|| "correction reply was empty".into());
        candidate.vet_status = VetStatus::Discarded;
        return candidate;
    };

    let second = runner.run(&CodeBlock::new(fixed.clone()));
    candidate.attempts = 2;
    let passed = second.is_success();
    candidate.reports.push(second);
    if passed {
        candidate.initial_source = Some(std::mem::replace(&mut candidate.source, fixed));
        candidate.vet_status = VetStatus::CorrectedPassed;
    } else {
        candidate.vet_status = VetStatus::Discarded;
    }
    candidate
}

/// Pulls `Instruction:` and `Input:` fields out of a reply. Labels may be
/// bolded or prefixed with `#`; each field runs until the next label.
pub fn parse_instruction_input(text: &str) -> Option<(String, String)> {
    let mut instruction: Option<Vec<&str>> = None;
    let mut input: Option<Vec<&str>> = None;
    let mut target = 0u8;
    for line in text.lines() {
        let t = line.trim().trim_start_matches(['#', '*', ' ']);
        let label = |name: &str| {
            t.get(..name.len())
                .filter(|h| h.eq_ignore_ascii_case(name))
                .map(|_| t[name.len()..].trim_start_matches('*').trim())
        };
        if let Some(rest) = label("instruction:") {
            instruction = Some(vec![rest]);
            target = 1;
        } else if let Some(rest) = label("input:") {
            input = Some(vec![rest]);
            target = 2;
        } else if target == 1 {
            instruction.as_mut().expect("open").push(line);
        } else if target == 2 {
            input.as_mut().expect("open").push(line);
        }
    }
    let join = |v: Vec<&str>| v.join("\n").trim().to_string();
    let (a, b) = (join(instruction?), join(input?));
    (!a.is_empty() && !b.is_empty()).then_some((a, b))
}

/// Instruction and input for a vetted script; the script is the output.
pub fn finalize_record(endpoint: &dyn ChatEndpoint, candidate: &CodeCandidate) -> Result<AlpacaRecord, StageError> {
    if !candidate.vet_status.is_kept() {
        return Err(StageError::Precondition { lineage: candidate.lineage, status: candidate.vet_status });
    }
    let mut ctx = prompts::context(render(
        prompts::INSTRUCTION_GEN,
        &[("statement", candidate.statement.trim()), ("code", candidate.source.trim_end())],
    ));
    for attempt in 0..2 {
        let reply = complete(endpoint, &ctx, "instruction-gen")?;
        if let Some((instruction, input)) = parse_instruction_input(&reply) {
            return Ok(AlpacaRecord { instruction, input, output: candidate.source.clone() });
        }
        if attempt == 0 {
            prompts::follow_up(&mut ctx, &reply, prompts::INSTRUCTION_REASK);
        }
    }
    Err(StageError::MalformedGeneration { lineage: candidate.lineage })
}

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use femagent_core::gateway::{FnEndpoint, GatewayError, ScriptedEndpoint};
use femagent_core::sandbox::{CodeRunner, ExecutionReport, ExitStatus, Sandbox, SandboxConfig};
use femagent_core::CodeBlock;
use femagent_forge::stages::{finalize_record, gen_problem_drafts, gen_variants, synthesize_code, vet_candidate};
use femagent_forge::{CodeCandidate, Lineage, PdeFamily, SeedCorpus, StageError, VariantAxis, VariantSpec, VetStatus};
use proptest::prelude::*;

fn drafts_reply(n: usize) -> String {
    PdeFamily::plan(n)
        .iter()
        .enumerate()
        .map(|(i, f)| format!("### Problem {}\nFamily: {f}\nStatement {} about {f}.\n", i + 1, i + 1))
        .collect()
}

fn leaf(statement: &str) -> VariantSpec {
    VariantSpec {
        lineage: Lineage::leaf(1, 2, 3),
        family: PdeFamily::Helmholtz,
        statement: statement.into(),
        domain: None,
        boundary: None,
    }
}

#[test]
fn seven_drafts_with_distinct_families() {
    let ep = ScriptedEndpoint::new().reply(drafts_reply(7));
    let d = gen_problem_drafts(&ep, &SeedCorpus::default(), 7, 4).unwrap();
    assert_eq!(d.len(), 7);
    assert_eq!(d.iter().map(|x| x.family).collect::<HashSet<_>>().len(), 7);
    assert_eq!(d[6].lineage.to_string(), "p07");
    assert_eq!(d[0].statement, "Statement 1 about Poisson electrostatics.");
    let prompt = ep.calls()[0].latest_user_message().unwrap().to_string();
    assert!(prompt.contains("### Problem 7 (Family: plasticity)"));
}

#[test]
fn short_draft_reply_retries_once_then_fails() {
    let ep = ScriptedEndpoint::new().reply(drafts_reply(5)).reply(drafts_reply(5)).reply(drafts_reply(7));
    let err = gen_problem_drafts(&ep, &SeedCorpus::default(), 7, 4).unwrap_err();
    assert!(matches!(err, StageError::ShortOutput { expected: 7, got: 5, .. }));
    assert_eq!(ep.call_count(), 2);

    let ep = ScriptedEndpoint::new().reply(drafts_reply(5)).reply(drafts_reply(7));
    assert_eq!(gen_problem_drafts(&ep, &SeedCorpus::default(), 7, 4).unwrap().len(), 7);
}

#[test]
fn single_draft() {
    let ep = ScriptedEndpoint::new().reply("### Problem 1\nA Helmholtz problem.");
    let d = gen_problem_drafts(&ep, &SeedCorpus::default(), 1, 4).unwrap();
    assert_eq!(d.len(), 1);
    // no Family line: the planned family is used
    assert_eq!(d[0].family, PdeFamily::PoissonElectrostatics);
}

fn echo_variants() -> FnEndpoint {
    femagent_forge::offline::variant_endpoint()
}

#[test]
fn ten_geometry_variants_have_distinct_domains() {
    let root = VariantSpec { lineage: Lineage::root(1), ..leaf("Heat on a square.") };
    let v = gen_variants(&echo_variants(), &root, VariantAxis::Geometry, 10, 42).unwrap();
    assert_eq!(v.len(), 10);
    assert_eq!(v.iter().map(|x| x.domain.unwrap()).collect::<HashSet<_>>().len(), 10);
    assert_eq!(v[9].lineage.to_string(), "p01-g10");
    assert!(v.iter().all(|x| x.statement.contains("Heat on a square.")));
}

#[test]
fn ten_boundary_variants_on_one_geometry_variant() {
    let mid = VariantSpec { lineage: "p02-g03".parse().unwrap(), ..leaf("Plate.") };
    let v = gen_variants(&echo_variants(), &mid, VariantAxis::Boundary, 10, 42).unwrap();
    assert_eq!(v.len(), 10);
    assert!(v.iter().all(|x| x.lineage.is_complete() && x.boundary.is_some()));
    let labels: HashSet<String> = v.iter().map(|x| x.boundary.unwrap().to_string()).collect();
    assert_eq!(labels.len(), 10);
}

#[test]
fn count_one_grows_lineage_by_one() {
    let root = VariantSpec { lineage: Lineage::root(4), ..leaf("x") };
    let g = gen_variants(&echo_variants(), &root, VariantAxis::Geometry, 1, 0).unwrap();
    assert_eq!(g.len(), 1);
    assert_eq!(g[0].lineage.depth(), root.lineage.depth() + 1);
    let b = gen_variants(&echo_variants(), &g[0], VariantAxis::Boundary, 1, 0).unwrap();
    assert_eq!(b[0].lineage.depth(), 3);
    assert!(gen_variants(&echo_variants(), &b[0], VariantAxis::Boundary, 1, 0).is_err());
    assert!(gen_variants(&echo_variants(), &root, VariantAxis::Boundary, 1, 0).is_err());
}

#[test]
fn fenced_reply_becomes_unvetted_candidate() {
    let ep = ScriptedEndpoint::new().reply("Here:\n```python\nprint('hi')\n```");
    let c = synthesize_code(&ep, &leaf("Solve it.")).unwrap();
    assert_eq!(c.vet_status, VetStatus::Unvetted);
    assert_eq!(c.source, "print('hi')");
    assert_eq!(c.statement, "Solve it.");
    assert_eq!(c.attempts, 0);
}

#[test]
fn prose_twice_is_no_code_block() {
    let ep = ScriptedEndpoint::new().reply("I would use dolfin.").reply("Still prose.");
    let err = synthesize_code(&ep, &leaf("Solve it.")).unwrap_err();
    assert!(matches!(err, StageError::NoCodeBlock { .. }));
    assert_eq!(ep.call_count(), 2);
    // the re-ask carries the first reply and a follow-up request
    assert_eq!(ep.calls()[1].messages.len(), 4);
}

#[test]
fn incomplete_variant_is_rejected() {
    let ep = ScriptedEndpoint::new().reply("```\nx\n```");
    let mid = VariantSpec { lineage: "p01-g01".parse().unwrap(), ..leaf("x") };
    assert!(synthesize_code(&ep, &mid).is_err());
    assert_eq!(ep.call_count(), 0);
}

/// Fails any script containing "FAIL"; counts executions.
#[derive(Default)]
struct Marker {
    runs: AtomicUsize,
}

impl CodeRunner for Marker {
    fn run(&self, code: &CodeBlock) -> ExecutionReport {
        self.runs.fetch_add(1, Ordering::SeqCst);
        let mut r = ExecutionReport::spawn_failure("");
        r.exit_status =
            if code.source.contains("FAIL") { ExitStatus::Nonzero { code: 1 } } else { ExitStatus::Success };
        r.stderr = if code.source.contains("FAIL") { "Traceback: FAIL".into() } else { String::new() };
        r
    }
}

fn candidate(source: &str) -> CodeCandidate {
    CodeCandidate::new(&leaf("Solve it."), source)
}

#[test]
fn first_run_success_is_passed() {
    let runner = Marker::default();
    let ep = ScriptedEndpoint::new();
    let c = vet_candidate(candidate("ok"), &runner, &ep);
    assert_eq!(c.vet_status, VetStatus::Passed);
    assert_eq!(c.reports.len(), 1);
    assert_eq!(ep.call_count(), 0);
    c.check_invariants().unwrap();
}

#[test]
fn corrected_syntax_error_passes_in_the_sandbox() {
    let dir = tempfile::tempdir().unwrap();
    let sandbox = Sandbox::new(SandboxConfig::for_vetting(dir.path()));
    let ep = ScriptedEndpoint::new().reply("Missing parenthesis.\n```python\nprint('fixed')\n```");
    let c = vet_candidate(candidate("print('broken'"), &sandbox, &ep);
    assert_eq!(c.vet_status, VetStatus::CorrectedPassed);
    assert_eq!(c.attempts, 2);
    assert!(matches!(c.reports[0].exit_status, ExitStatus::Nonzero { .. }));
    assert!(c.reports[0].stderr.contains("SyntaxError"));
    assert_eq!(c.reports[1].exit_status, ExitStatus::Success);
    assert_eq!(c.reports[1].stdout.trim(), "fixed");
    assert_eq!(c.source, "print('fixed')");
    assert_eq!(c.initial_source.as_deref(), Some("print('broken'"));
    // the correction prompt carried both the code and the error
    let prompt = ep.calls()[0].latest_user_message().unwrap().to_string();
    assert!(prompt.contains("print('broken'") && prompt.contains("SyntaxError"));
    c.check_invariants().unwrap();
}

#[test]
fn fail_then_fail_is_discarded() {
    let runner = Marker::default();
    let ep = ScriptedEndpoint::new().reply("```\nstill FAIL\n```");
    let c = vet_candidate(candidate("FAIL"), &runner, &ep);
    assert_eq!(c.vet_status, VetStatus::Discarded);
    assert_eq!(c.attempts, 2);
    assert_eq!(runner.runs.load(Ordering::SeqCst), 2);
    c.check_invariants().unwrap();
}

#[test]
fn unavailable_correction_discards_after_one_run() {
    let runner = Marker::default();
    let ep = FnEndpoint::new(|_| Err(GatewayError::ErrorPayload { status: 400, message: "bad".into() }));
    let c = vet_candidate(candidate("FAIL"), &runner, &ep);
    assert_eq!(c.vet_status, VetStatus::Discarded);
    assert_eq!(c.attempts, 1);
    assert!(c.note.unwrap().contains("correction unavailable"));
}

#[test]
fn vetted_candidates_are_not_rerun() {
    let runner = Marker::default();
    let once = vet_candidate(candidate("ok"), &runner, &ScriptedEndpoint::new());
    let again = vet_candidate(once.clone(), &runner, &ScriptedEndpoint::new());
    assert_eq!(once, again);
    assert_eq!(runner.runs.load(Ordering::SeqCst), 1);
}

#[test]
fn finalize_passing_candidate() {
    let ep = ScriptedEndpoint::new().reply("Instruction: Write a Helmholtz solver.\nInput: k = 10 on the unit disk.");
    let mut c = candidate("print(1)");
    c.vet_status = VetStatus::Passed;
    let r = finalize_record(&ep, &c).unwrap();
    assert_eq!(r.instruction, "Write a Helmholtz solver.");
    assert_eq!(r.input, "k = 10 on the unit disk.");
    assert_eq!(r.output, "print(1)");
}

#[test]
fn finalize_rejects_discarded() {
    let ep = ScriptedEndpoint::new().reply("Instruction: a\nInput: b");
    let mut c = candidate("print(1)");
    c.vet_status = VetStatus::Discarded;
    assert!(matches!(finalize_record(&ep, &c), Err(StageError::Precondition { .. })));
    assert_eq!(ep.call_count(), 0);
}

#[test]
fn finalize_retries_once_on_missing_field() {
    let ep = ScriptedEndpoint::new().reply("Instruction: only this").reply("Input: and only this");
    let mut c = candidate("print(1)");
    c.vet_status = VetStatus::CorrectedPassed;
    assert!(matches!(finalize_record(&ep, &c), Err(StageError::MalformedGeneration { .. })));
    assert_eq!(ep.call_count(), 2);
}

/// Outcome of each execution is drawn up front; the corrector may also fail.
struct Planned {
    outcomes: Mutex<Vec<bool>>,
    runs: AtomicUsize,
}

impl CodeRunner for Planned {
    fn run(&self, _code: &CodeBlock) -> ExecutionReport {
        self.runs.fetch_add(1, Ordering::SeqCst);
        let ok = self.outcomes.lock().unwrap().pop().unwrap_or(false);
        let mut r = ExecutionReport::spawn_failure("");
        r.exit_status = if ok { ExitStatus::Success } else { ExitStatus::Nonzero { code: 2 } };
        r
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]
    #[test]
    fn never_more_than_two_executions(first in any::<bool>(), second in any::<bool>(), corrector_up in any::<bool>(), fenced in any::<bool>()) {
        let runner = Planned { outcomes: Mutex::new(vec![second, first]), runs: AtomicUsize::new(0) };
        let ep = FnEndpoint::new(move |ctx| {
            if !corrector_up {
                return Err(GatewayError::TransportExhausted { attempts: 3, last: "down".into() });
            }
            let body = if fenced { "```python\nfixed\n```" } else { "fixed" };
            Ok(femagent_core::gateway::CompletionResult {
                content: body.into(),
                prompt_tokens: ctx.estimated_tokens() as u64,
                output_tokens: 2,
                finish_reason: femagent_core::gateway::FinishReason::Stop,
            })
        });
        let c = vet_candidate(candidate("x"), &runner, &ep);
        let runs = runner.runs.load(Ordering::SeqCst);
        prop_assert!(runs <= 2);
        prop_assert_eq!(runs as u32, c.attempts);
        prop_assert!(c.check_invariants().is_ok());
        let expected = match (first, corrector_up, second) {
            (true, _, _) => VetStatus::Passed,
            (false, false, _) => VetStatus::Discarded,
            (false, true, true) => VetStatus::CorrectedPassed,
            (false, true, false) => VetStatus::Discarded,
        };
        prop_assert_eq!(c.vet_status, expected);
    }
}

use std::sync::{Arc, Mutex};

use femagent_core::chat::{CodeBlock, MessageKind, Transcript, TranscriptStatus};
use femagent_core::clock::FixedClock;
use femagent_core::gateway::{ChatEndpoint, EndpointRegistry, FnEndpoint, ScriptedEndpoint};
use femagent_core::orchestra::audit::{orchestra_violations, speaker_sequence};
use femagent_core::orchestra::{
    run_orchestra, AdminChannel, Decision, DecisionSource, Headless, OrchestraLimits, OrchestraStatus, Roster,
    ScriptedAdmin, Selection, SelectionSource,
};
use femagent_core::roles::{AgentSpec, Role};
use femagent_core::sandbox::{CodeRunner, ExecutionReport, ExitStatus};
use femagent_core::session::Session;
use proptest::prelude::*;

struct FakeRunner;

impl CodeRunner for FakeRunner {
    fn run(&self, code: &CodeBlock) -> ExecutionReport {
        let mut r = ExecutionReport::spawn_failure("");
        r.exit_status =
            if code.source.contains("FAIL") { ExitStatus::Nonzero { code: 1 } } else { ExitStatus::Success };
        if !r.is_success() {
            r.stderr = "NameError: name 'FAIL' is not defined\n".into();
        }
        r
    }
}

const CODE_OK: &str = "```python\nfrom dolfin import *\nprint('ok')\n```";
const CODE_BAD: &str = "```python\nFAIL\n```";

/// Roster where every role has its own scripted endpoint named after it.
fn roster(scripts: Vec<(Role, Arc<dyn ChatEndpoint>)>, admin: Arc<dyn AdminChannel>) -> Roster {
    let mut reg = EndpointRegistry::new();
    for r in [Role::Coordinator, Role::Planner, Role::Formulator, Role::Coder, Role::Corrector, Role::Evaluator] {
        reg.insert(r.name(), Arc::new(ScriptedEndpoint::new()));
    }
    for (r, ep) in scripts {
        reg.insert(r.name(), ep);
    }
    let mut roster = Roster::uniform("unused", reg, Arc::new(FakeRunner), admin);
    for r in [Role::Coordinator, Role::Planner, Role::Formulator, Role::Coder, Role::Corrector, Role::Evaluator] {
        let spec = AgentSpec::for_role(r, Some(r.name().to_string()));
        match r {
            Role::Coordinator => roster.coordinator = spec,
            Role::Planner => roster.planner = spec,
            Role::Formulator => roster.formulator = spec,
            Role::Coder => roster.coder = spec,
            Role::Corrector => roster.corrector = spec,
            _ => roster.evaluator = spec,
        }
    }
    roster
}

fn script(replies: &[&str]) -> Arc<dyn ChatEndpoint> {
    let mut ep = ScriptedEndpoint::new();
    for r in replies {
        ep = ep.reply(*r);
    }
    Arc::new(ep)
}

fn session(id: &str) -> Session {
    let names = Role::ALL.iter().map(|r| r.name().to_string()).collect();
    Session::new(id, names).with_clock(Arc::new(FixedClock::epoch()))
}

fn selections(t: &Transcript) -> Vec<Selection> {
    t.messages()
        .iter()
        .filter(|m| m.sender == "coordinator")
        .map(|m| serde_json::from_str(&m.content).unwrap())
        .collect()
}

#[test]
fn end_to_end_walk_to_admin_exit() {
    let roster = roster(
        vec![
            (Role::Coordinator, script(&["planner", "formulator", "coder", "evaluator"])),
            (Role::Planner, script(&["1. formulate 2. code 3. evaluate"])),
            (Role::Formulator, script(&["-div(grad u) = f, u = 0 on the boundary"])),
            (Role::Coder, script(&[CODE_OK])),
            (Role::Evaluator, script(&["Outputs match.\nSATISFIED"])),
        ],
        Arc::new(ScriptedAdmin::decisions([Decision::Exit])),
    );
    let mut s = session("o1");
    let out = run_orchestra(&mut s, "Solve the Poisson problem.", &roster, OrchestraLimits::default()).unwrap();
    assert_eq!(out.status, OrchestraStatus::TerminatedByAdmin);
    assert!(out.final_report.as_ref().unwrap().is_success());
    assert_eq!(out.gate_history.len(), 1);
    assert_eq!(out.gate_history[0].decision, Decision::Exit);
    assert_eq!(out.gate_history[0].source, DecisionSource::Human);
    assert_eq!(
        speaker_sequence(s.transcript()),
        [
            "user",
            "coordinator",
            "planner",
            "coordinator",
            "formulator",
            "coordinator",
            "coder",
            "executor",
            "coordinator",
            "evaluator",
            "admin"
        ]
    );
    assert_eq!(s.transcript().status(), TranscriptStatus::TerminatedByAdmin);
    assert!(orchestra_violations(s.transcript()).is_empty(), "{:?}", orchestra_violations(s.transcript()));
}

#[test]
fn ineligible_choice_twice_falls_back_to_planner() {
    let roster = roster(
        vec![(Role::Coordinator, script(&["executor", "corrector"])), (Role::Planner, script(&["plan"]))],
        Arc::new(Headless),
    );
    let mut s = session("o2");
    let limits = OrchestraLimits { max_selections: 1, ..OrchestraLimits::default() };
    let out = run_orchestra(&mut s, "p", &roster, limits).unwrap();
    assert_eq!(out.status, OrchestraStatus::Exhausted);
    let sel = selections(s.transcript());
    assert_eq!(sel, vec![Selection { next: Role::Planner, source: SelectionSource::Fallback }]);
    assert_eq!(s.usage().agent("coordinator").calls, 2);
}

#[test]
fn failure_correction_success_ordering() {
    let roster = roster(
        vec![
            (Role::Coordinator, script(&["coder"])),
            (Role::Coder, script(&[CODE_BAD, CODE_OK])),
            (Role::Corrector, script(&["Define FAIL or remove the line."])),
        ],
        Arc::new(Headless),
    );
    let mut s = session("o3");
    let limits = OrchestraLimits { max_selections: 1, ..OrchestraLimits::default() };
    let out = run_orchestra(&mut s, "p", &roster, limits).unwrap();
    assert!(out.final_report.unwrap().is_success());
    let seq = speaker_sequence(s.transcript());
    assert_eq!(seq[2..], ["coder", "executor", "corrector", "coder", "executor"]);
    assert_eq!(seq.iter().filter(|x| *x == "corrector").count(), 1);
    assert!(orchestra_violations(s.transcript()).is_empty());
}

#[test]
fn clean_first_try_has_no_corrector() {
    let roster =
        roster(vec![(Role::Coordinator, script(&["coder"])), (Role::Coder, script(&[CODE_OK]))], Arc::new(Headless));
    let mut s = session("o3b");
    let limits = OrchestraLimits { max_selections: 1, ..OrchestraLimits::default() };
    run_orchestra(&mut s, "p", &roster, limits).unwrap();
    assert!(!speaker_sequence(s.transcript()).contains(&"corrector".to_string()));
}

#[test]
fn persistent_failure_returns_control_to_coordinator() {
    let roster = roster(
        vec![
            (Role::Coordinator, script(&["coder", "planner"])),
            (Role::Coder, script(&[CODE_BAD, CODE_BAD])),
            (Role::Corrector, script(&["fix it"])),
            (Role::Planner, script(&["replan"])),
        ],
        Arc::new(Headless),
    );
    let mut s = session("o4");
    let limits = OrchestraLimits { max_selections: 2, max_rounds: 2, ..OrchestraLimits::default() };
    let out = run_orchestra(&mut s, "p", &roster, limits).unwrap();
    let seq = speaker_sequence(s.transcript());
    assert_eq!(seq[2..], ["coder", "executor", "corrector", "coder", "executor", "coordinator", "planner"]);
    assert!(!out.final_report.unwrap().is_success());
    assert!(orchestra_violations(s.transcript()).is_empty());
}

#[test]
fn coordinator_that_never_calls_evaluator_hits_the_cap() {
    let planner_replies = vec!["more planning"; 20];
    let roster = roster(
        vec![(Role::Coordinator, script(&["planner"; 20])), (Role::Planner, script(&planner_replies))],
        Arc::new(Headless),
    );
    let mut s = session("o5");
    let limits = OrchestraLimits { max_selections: 20, ..OrchestraLimits::default() };
    let out = run_orchestra(&mut s, "p", &roster, limits).unwrap();
    assert_eq!(out.status, OrchestraStatus::Exhausted);
    assert_eq!(out.selections, 20);
    assert!(out.gate_history.is_empty());
    assert!(out.reason.unwrap().contains("selection cap"));
    assert_eq!(s.transcript().status(), TranscriptStatus::Exhausted);
}

#[test]
fn evaluator_rejection_sends_formulator_back_in() {
    let roster = roster(
        vec![
            (Role::Coordinator, script(&["planner", "formulator", "coder", "evaluator", "formulator"])),
            (Role::Planner, script(&["plan"])),
            (Role::Formulator, script(&["f v1", "f v2 with the missing Neumann condition"])),
            (Role::Coder, script(&[CODE_OK])),
            (Role::Evaluator, script(&["The formulation misses the Neumann condition; formulator must fix it."])),
        ],
        Arc::new(Headless),
    );
    let mut s = session("o6");
    let limits = OrchestraLimits { max_selections: 5, ..OrchestraLimits::default() };
    let out = run_orchestra(&mut s, "p", &roster, limits).unwrap();
    assert_eq!(out.gate_history.len(), 1);
    assert_eq!(out.gate_history[0].decision, Decision::Continue);
    assert_eq!(out.gate_history[0].source, DecisionSource::AutoPolicy);
    let seq = speaker_sequence(s.transcript());
    let coder_at = seq.iter().position(|x| x == "coder").unwrap();
    assert!(seq[coder_at..].contains(&"formulator".to_string()));
    assert_eq!(seq.last().unwrap(), "formulator");
    assert!(orchestra_violations(s.transcript()).is_empty());
}

#[test]
fn human_continue_hands_floor_back_to_coordinator() {
    let roster = roster(
        vec![
            (Role::Coordinator, script(&["evaluator", "evaluator"])),
            (Role::Evaluator, script(&["SATISFIED", "SATISFIED"])),
        ],
        Arc::new(ScriptedAdmin::decisions([Decision::Continue, Decision::Exit])),
    );
    let mut s = session("o7");
    let out = run_orchestra(&mut s, "p", &roster, OrchestraLimits::default()).unwrap();
    assert_eq!(out.status, OrchestraStatus::TerminatedByAdmin);
    let msgs = s.transcript().messages();
    let first_admin = msgs.iter().position(|m| m.sender == "admin").unwrap();
    assert_eq!(msgs[first_admin + 1].sender, "coordinator");
    assert_eq!(msgs[first_admin + 1].kind, MessageKind::Control);
    assert_eq!(out.gate_history.iter().map(|g| g.decision).collect::<Vec<_>>(), [Decision::Continue, Decision::Exit]);
}

#[test]
fn headless_marker_auto_exits() {
    let roster = roster(
        vec![
            (Role::Coordinator, script(&["evaluator"])),
            (Role::Evaluator, script(&["All requested outputs exist.\nSATISFIED"])),
        ],
        Arc::new(Headless),
    );
    let mut s = session("o8");
    let out = run_orchestra(&mut s, "p", &roster, OrchestraLimits::default()).unwrap();
    assert_eq!(out.status, OrchestraStatus::TerminatedByAdmin);
    assert_eq!(out.gate_history[0].source, DecisionSource::AutoPolicy);
    assert_eq!(out.gate_history[0].decision, Decision::Exit);
    let admin = s.transcript().messages().last().unwrap();
    assert_eq!(admin.content, r#"{"decision":"exit","source":"auto-policy"}"#);
}

#[test]
fn admin_timeout_falls_back_to_policy() {
    let admin = Arc::new(ScriptedAdmin::new([None]));
    let roster = roster(
        vec![(Role::Coordinator, script(&["evaluator"])), (Role::Evaluator, script(&["SATISFIED"]))],
        admin.clone(),
    );
    let mut s = session("o8b");
    let out = run_orchestra(&mut s, "p", &roster, OrchestraLimits::default()).unwrap();
    assert_eq!(out.gate_history[0].source, DecisionSource::AutoPolicy);
    let req = &admin.requests()[0];
    assert_eq!(req.visit, 1);
    assert_eq!(req.evaluator_message, "SATISFIED");
    assert!(!req.has_code);
}

#[test]
fn coder_loop_entry_cap_is_global_exhaustion() {
    let roster = roster(
        vec![(Role::Coordinator, script(&["coder"; 4])), (Role::Coder, script(&[CODE_OK; 3]))],
        Arc::new(Headless),
    );
    let mut s = session("o9");
    let out = run_orchestra(&mut s, "p", &roster, OrchestraLimits::default()).unwrap();
    assert_eq!(out.status, OrchestraStatus::Exhausted);
    assert_eq!(out.coder_loops, 3);
    assert_eq!(out.selections, 4);
    assert!(out.reason.unwrap().contains("coder loop cap"));
}

#[test]
fn gateway_failure_fails_the_session() {
    let roster = roster(vec![(Role::Coordinator, script(&["planner"]))], Arc::new(Headless));
    let mut s = session("o10");
    let out = run_orchestra(&mut s, "p", &roster, OrchestraLimits::default()).unwrap();
    assert_eq!(out.status, OrchestraStatus::Failed);
    assert_eq!(s.transcript().status(), TranscriptStatus::Failed);
}

#[test]
fn coder_and_corrector_can_share_an_endpoint() {
    let shared = script(&[CODE_BAD, "replace FAIL with pass", CODE_OK]);
    let mut r = roster(vec![(Role::Coordinator, script(&["coder"]))], Arc::new(Headless));
    r.endpoints.insert("finetuned", shared);
    r.coder.endpoint = Some("finetuned".into());
    r.corrector.endpoint = Some("finetuned".into());
    assert_ne!(r.coder.system_prompt, r.corrector.system_prompt);
    let mut s = session("o11");
    let out = run_orchestra(&mut s, "p", &r, OrchestraLimits { max_selections: 1, ..Default::default() }).unwrap();
    assert!(out.final_report.unwrap().is_success());
}

#[test]
fn scripted_sessions_replay_byte_identically() {
    let run = || {
        let roster = roster(
            vec![
                (Role::Coordinator, script(&["bogus", "nonsense", "coder", "evaluator", "evaluator"])),
                (Role::Planner, script(&["plan"])),
                (Role::Coder, script(&[CODE_BAD, CODE_OK])),
                (Role::Corrector, script(&["fix"])),
                (Role::Evaluator, script(&["not yet", "SATISFIED"])),
            ],
            Arc::new(ScriptedAdmin::new([None, Some(Decision::Exit)])),
        );
        let mut s = session("replay");
        let out = run_orchestra(&mut s, "p", &roster, OrchestraLimits::default()).unwrap();
        (serde_json::to_string(&out).unwrap(), s.transcript().to_jsonl())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.1.contains("fallback"));
}

/// Pops replies from a shared list; falls back to `default` when empty.
fn cycling(replies: Vec<String>, default: &'static str) -> Arc<dyn ChatEndpoint> {
    let q = Mutex::new(replies.into_iter().rev().collect::<Vec<_>>());
    Arc::new(FnEndpoint::text(move |_| q.lock().unwrap().pop().unwrap_or_else(|| default.to_string())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_sessions_keep_protocol_invariants(
        coord in prop::collection::vec(prop::sample::select(vec!["planner", "formulator", "coder", "evaluator", "executor", "admin", "??", " Coder "]), 0..40),
        code in prop::collection::vec(prop::sample::select(vec![CODE_OK, CODE_BAD, "no code here"]), 0..20),
        evals in prop::collection::vec(prop::sample::select(vec!["SATISFIED", "not satisfied", "redo"]), 0..10),
        admin in prop::collection::vec(prop::option::of(prop::sample::select(vec![Decision::Continue, Decision::Exit])), 0..10),
        max_selections in 1u32..30,
        max_rounds in 1u32..4,
    ) {
        let roster = roster(
            vec![
                (Role::Coordinator, cycling(coord.iter().map(|s| s.to_string()).collect(), "evaluator")),
                (Role::Planner, cycling(vec![], "plan")),
                (Role::Formulator, cycling(vec![], "weak form")),
                (Role::Coder, cycling(code.iter().map(|s| s.to_string()).collect(), CODE_BAD)),
                (Role::Corrector, cycling(vec![], "fix")),
                (Role::Evaluator, cycling(evals.iter().map(|s| s.to_string()).collect(), "no")),
            ],
            Arc::new(ScriptedAdmin::new(admin)),
        );
        let limits = OrchestraLimits { max_selections, max_rounds, ..OrchestraLimits::default() };
        let mut s = session("prop");
        let out = run_orchestra(&mut s, "p", &roster, limits).unwrap();
        let t = s.transcript();
        let violations = orchestra_violations(t);
        prop_assert!(violations.is_empty(), "{:?}", violations);
        prop_assert!(out.selections <= max_selections);
        prop_assert!(out.coder_loops <= limits.max_coder_loops);
        let exited = out.gate_history.last().is_some_and(|g| g.decision == Decision::Exit);
        match out.status {
            OrchestraStatus::TerminatedByAdmin => prop_assert!(exited && out.reason.is_none()),
            OrchestraStatus::Exhausted => prop_assert!(!exited && out.reason.is_some()),
            OrchestraStatus::Failed => prop_assert!(false, "unexpected failure {:?}", out.reason),
        }
        // per coder loop, executor runs never exceed max_rounds
        let mut runs = 0;
        for m in t.messages() {
            if m.sender == "coordinator" { runs = 0; }
            if m.kind == MessageKind::ExecReport { runs += 1; prop_assert!(runs <= max_rounds); }
        }
    }
}

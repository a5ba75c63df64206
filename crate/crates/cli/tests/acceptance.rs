//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Built without the libtest harness so the table always reaches stdout.
//! Each check panics on a mismatch; a check also fails when it overruns its
//! time budget. Oracles are computed here, independently of the crates under
//! test, wherever a value is derived rather than quoted.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use femagent_bench::baseline::{audit_isolation, baseline_coder, run_baseline_two_shot};
use femagent_bench::grade::References;
use femagent_bench::{
    accuracy_report, grade_ledger, load_registry, Difficulty, LedgerEntry, ManualVerdict, Physics, RunLedger,
    ScalarComparator, Verdict,
};
use femagent_core::chat::{CodeBlock, MessageKind, Transcript, TranscriptStatus};
use femagent_core::duo::{run_duo, DuoLimits, DuoStatus};
use femagent_core::gateway::{
    ChatEndpoint, CompletionResult, EndpointRegistry, FinishReason, FnEndpoint, GatewayError, ScriptedEndpoint,
};
use femagent_core::orchestra::{
    run_orchestra, AdminChannel, Decision, Headless, OrchestraLimits, OrchestraStatus, Roster, ScriptedAdmin,
};
use femagent_core::roles::{AgentSpec, Role};
use femagent_core::sandbox::{collect_artifacts, CodeRunner, ExecutionReport, ExitStatus, Sandbox, SandboxConfig};
use femagent_core::session::Session;
use femagent_core::FixedClock;
use femagent_forge::offline::{self, MarkerRunner};
use femagent_forge::stages::vet_candidate;
use femagent_forge::{
    kfold_indices, kfold_split, AlpacaRecord, CodeCandidate, ForgeEndpoints, Lineage, PdeFamily, Pipeline,
    PipelineConfig, VariantSpec, VetStatus,
};
use femagent_lora::adapter::{forward_two_path, merge_adapter, trainable_param_count, AdapterPair};
use femagent_lora::matrix::Matrix;
use femagent_lora::quant::{BlockQuantized, QuantSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> String,
}

fn main() {
    let criteria = [
        Criterion { name: "accuracy-arithmetic", budget: Duration::from_secs(1), check: accuracy_arithmetic },
        Criterion { name: "registry-census", budget: Duration::from_secs(1), check: registry_census },
        Criterion { name: "pipeline-combinatorics", budget: Duration::from_secs(60), check: pipeline_combinatorics },
        Criterion { name: "vetting-bound", budget: Duration::from_secs(60), check: vetting_bound },
        Criterion { name: "duo-protocol", budget: Duration::from_secs(10), check: duo_protocol },
        Criterion { name: "orchestra-protocol", budget: Duration::from_secs(10), check: orchestra_protocol },
        Criterion { name: "baseline-isolation", budget: Duration::from_secs(5), check: baseline_isolation },
        Criterion { name: "lora-math", budget: Duration::from_secs(30), check: lora_math },
        Criterion { name: "kfold-split", budget: Duration::from_secs(1), check: kfold },
        Criterion { name: "sandbox", budget: Duration::from_secs(15), check: sandbox },
    ];
    let mut passed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.check);
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(p) => (
                false,
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default(),
            ),
        };
        let detail = detail.split_whitespace().collect::<Vec<_>>().join(" ");
        passed += usize::from(ok);
        println!("{} {:<24} {:>9.3}s  {}", if ok { "PASS" } else { "FAIL" }, c.name, took.as_secs_f64(), detail);
    }
    println!("{passed} of {} acceptance criteria passed", criteria.len());
    if passed != criteria.len() {
        std::process::exit(1);
    }
}

fn registry_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../registry")
}

/// Percent with two decimals, by floating-point formatting (the crate uses exact integers).
fn oracle_percent(correct: u64, total: u64) -> String {
    format!("{:.2}", correct as f64 * 100.0 / total as f64)
}

fn accuracy_arithmetic() -> String {
    let registry = load_registry(&registry_dir()).unwrap();
    let framework = "orchestra/gpt-oss-120b-ft";
    let quota = BTreeMap::from([(Physics::Solid, 15), (Physics::Fluid, 11), (Physics::Multiphysics, 2)]);
    let mut taken: BTreeMap<Physics, u64> = BTreeMap::new();
    let mut ledger = RunLedger::new();
    let mut manual = Vec::new();
    for p in registry.problems() {
        ledger.insert(LedgerEntry {
            framework_id: framework.into(),
            problem_id: p.id.clone(),
            status: "terminated-by-admin".into(),
            executable: true,
            final_code: None,
            final_report: None,
            transcript_refs: Vec::new(),
            scalars: BTreeMap::new(),
            failure: None,
            verdict: Verdict::ungraded(p.id.clone(), true),
        });
        let n = taken.entry(p.physics).or_default();
        let correct = *n < quota[&p.physics];
        *n += u64::from(correct);
        manual.push(ManualVerdict {
            problem_id: p.id.clone(),
            framework_id: None,
            correct,
            grader_id: "expert".into(),
            notes: String::new(),
            confirmed: true,
        });
    }
    let summary = grade_ledger(&mut ledger, &References::new(), &manual, &ScalarComparator { rel_tol: 1e-2 });
    assert_eq!((summary.graded, summary.conflicts.len()), (39, 0));
    let r = accuracy_report(&ledger, framework, &registry);
    assert_eq!((r.overall.correct, r.overall.total), (28, 39));
    assert_eq!(r.overall.percent, oracle_percent(28, 39));
    assert_eq!(r.overall.percent, "71.79");
    let bars: Vec<&str> = Physics::ALL.iter().map(|p| r.by_physics[p].percent.as_str()).collect();
    let oracle: Vec<String> = [(15, 16), (11, 15), (2, 8)].iter().map(|&(c, t)| oracle_percent(c, t)).collect();
    assert_eq!(bars, oracle);
    assert_eq!(bars, ["93.75", "73.33", "25.00"]);
    format!("overall {}% (28/39); solid {}, fluid {}, multiphysics {}", r.overall.percent, bars[0], bars[1], bars[2])
}

fn registry_census() -> String {
    let registry = load_registry(&registry_dir()).unwrap();
    // oracle: count the raw files without the crate's parser
    let mut physics: BTreeMap<String, usize> = BTreeMap::new();
    let mut difficulty: BTreeMap<String, usize> = BTreeMap::new();
    let mut files = 0;
    for entry in std::fs::read_dir(registry_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let v: toml::Table = std::fs::read_to_string(&path).unwrap().parse().unwrap();
            *physics.entry(v["physics"].as_str().unwrap().to_string()).or_default() += 1;
            *difficulty.entry(v["difficulty"].as_str().unwrap().to_string()).or_default() += 1;
            files += 1;
        }
    }
    assert_eq!(files, 39);
    assert_eq!(registry.len(), 39);
    let by_p: Vec<usize> = Physics::ALL.iter().map(|p| registry.by_physics()[p]).collect();
    let by_d: Vec<usize> = Difficulty::ALL.iter().map(|d| registry.by_difficulty()[d]).collect();
    assert_eq!(by_p, [16, 15, 8]);
    assert_eq!(by_d, [13, 13, 13]);
    assert_eq!(by_p, ["solid", "fluid", "multiphysics"].map(|k| physics[k]));
    assert_eq!(by_d, ["easy", "medium", "hard"].map(|k| difficulty[k]));
    format!("39 problems; physics {by_p:?}; difficulty {by_d:?}")
}

const HARD: &str = "IRREPARABLE";
const SOFT: &str = "FIXABLE";

/// Offline endpoints whose first `hard` leaves never run and the next `soft` run after one correction.
fn forge_endpoints(y: usize, z: usize, hard: usize, soft: usize) -> ForgeEndpoints {
    let code = offline::code_endpoint(move |lineage, _statement| {
        let l = lineage.expect("prompt carries the problem id");
        let i = ((l.problem as usize - 1) * y + (l.geometry.unwrap() as usize - 1)) * z
            + (l.boundary.unwrap() as usize - 1);
        let mark = if i < hard {
            HARD
        } else if i < hard + soft {
            SOFT
        } else {
            ""
        };
        format!("# {l}\nprint('done') # {mark}")
    });
    ForgeEndpoints {
        code_gen: Arc::new(code),
        correction: Arc::new(offline::correction_endpoint(|s| s.replace(SOFT, "corrected"))),
        ..offline::endpoints()
    }
}

fn forge_config(dir: &Path, (n, y, z): (usize, usize, usize)) -> PipelineConfig {
    PipelineConfig {
        n_problems: n,
        y_geometry: y,
        z_boundary: z,
        rng_seed: 3,
        output_dir: dir.join("out"),
        parallelism: 8,
        ..PipelineConfig::default()
    }
}

fn pipeline_combinatorics() -> String {
    for shape @ (n, y, z) in [(2, 2, 2), (3, 1, 4)] {
        let dir = tempfile::tempdir().unwrap();
        let runner = MarkerRunner::new([HARD, SOFT]);
        let m = Pipeline::new(forge_config(dir.path(), shape), &forge_endpoints(y, z, 0, 0), &runner).run().unwrap();
        assert_eq!(m.counts.candidates, n * y * z, "{shape:?}");
        assert_eq!(m.counts.records, n * y * z, "{shape:?}");
    }
    let dir = tempfile::tempdir().unwrap();
    let seed = dir.path().join("seed.jsonl");
    let lines: Vec<String> = (0..503)
        .map(|i| serde_json::json!({"instruction": format!("Seed {i}: heat conduction"), "input": "", "output": format!("print({i})")}).to_string())
        .collect();
    std::fs::write(&seed, lines.join("\n")).unwrap();
    let mut cfg = forge_config(dir.path(), (7, 10, 10));
    cfg.seed_paths = vec![seed];
    let runner = MarkerRunner::new([HARD, SOFT]);
    let m = Pipeline::new(cfg, &forge_endpoints(10, 10, 199, 51), &runner).run().unwrap();
    let c = &m.counts;
    assert_eq!(c.candidates, 7 * 10 * 10);
    assert_eq!(c.discarded, 199);
    assert_eq!(c.records, 700 - 199);
    assert_eq!(c.total, 503 + 501);
    let written = std::fs::read_to_string(&m.records_path).unwrap().lines().count();
    assert_eq!(written, 1004);
    assert!(m.check().is_empty(), "{:?}", m.check());
    format!("8 and 12 candidates; 700 -> {} records (+{} seed = {written})", c.records, c.seed)
}

fn vetting_bound() -> String {
    /// Executes nothing; outcomes come from a per-candidate plan.
    struct Planned {
        outcomes: Mutex<Vec<bool>>,
        runs: AtomicUsize,
    }
    impl CodeRunner for Planned {
        fn run(&self, _code: &CodeBlock) -> ExecutionReport {
            self.runs.fetch_add(1, Ordering::SeqCst);
            let mut r = ExecutionReport::spawn_failure("");
            r.exit_status = if self.outcomes.lock().unwrap().pop().unwrap_or(false) {
                ExitStatus::Success
            } else {
                ExitStatus::Nonzero { code: 1 }
            };
            r
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..1000u32 {
        let (first, second, corrector_up, fenced) =
            (rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.8), rng.random_bool(0.8));
        let runner = Planned { outcomes: Mutex::new(vec![second, first]), runs: AtomicUsize::new(0) };
        let corrector = FnEndpoint::new(move |_| {
            if !corrector_up {
                return Err(GatewayError::TransportExhausted { attempts: 3, last: "down".into() });
            }
            let content = if fenced { "```python\nprint('fixed')\n```" } else { "print('fixed')" };
            Ok(CompletionResult {
                content: content.into(),
                prompt_tokens: 10,
                output_tokens: 5,
                finish_reason: FinishReason::Stop,
            })
        });
        let variant = VariantSpec {
            lineage: Lineage::leaf(1 + i / 100, 1 + (i / 10) % 10, 1 + i % 10),
            family: PdeFamily::Helmholtz,
            statement: format!("candidate {i}"),
            domain: None,
            boundary: None,
        };
        let c = vet_candidate(CodeCandidate::new(&variant, "print('x')"), &runner, &corrector);
        let runs = runner.runs.load(Ordering::SeqCst);
        assert!(runs <= 2, "candidate {i} executed {runs} times");
        assert_eq!(runs, c.reports.len());
        assert_eq!(runs as u32, c.attempts);
        // state machine: first success passes; one correction, then discard
        let expected = match (first, corrector_up, second) {
            (true, _, _) => VetStatus::Passed,
            (false, true, true) => VetStatus::CorrectedPassed,
            _ => VetStatus::Discarded,
        };
        assert_eq!(c.vet_status, expected, "candidate {i}");
        assert_eq!(runs, if first || !corrector_up { 1 } else { 2 }, "candidate {i}");
        c.check_invariants().unwrap();
        *tally.entry(c.vet_status.to_string()).or_default() += 1;
    }
    format!("1000 candidates, at most 2 runs each; {tally:?}")
}

/// Succeeds unless the script mentions FAIL.
struct FailMarker;

impl CodeRunner for FailMarker {
    fn run(&self, code: &CodeBlock) -> ExecutionReport {
        let mut r = ExecutionReport::spawn_failure("");
        if code.source.contains("FAIL") {
            r.exit_status = ExitStatus::Nonzero { code: 1 };
            r.stderr = "NameError: name 'FAIL' is not defined\n".into();
        } else {
            r.exit_status = ExitStatus::Success;
            r.stdout = "ok\n".into();
        }
        r
    }
}

fn fenced(src: &str) -> String {
    format!("```python\n{src}\n```")
}

fn duo_session(id: &str) -> Session {
    Session::new(id, vec!["user".into(), "fenics_coder".into(), "executor".into()])
        .with_clock(Arc::new(FixedClock::epoch()))
}

fn duo_protocol() -> String {
    let coder = AgentSpec::assistant("fenics_coder", "write dolfin code", "scripted");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let failures = rng.random_range(0..6u32);
        let max_rounds = rng.random_range(1..6u32);
        let mut ep = ScriptedEndpoint::new();
        for f in 0..failures {
            ep = ep.reply(fenced(&format!("FAIL {f}")));
        }
        ep = ep.reply(fenced("print('ok')"));
        let mut s = duo_session(&format!("duo-{case}"));
        let out = run_duo(
            &mut s,
            "Solve the problem.",
            &coder,
            &ep,
            &FailMarker,
            DuoLimits { max_rounds, ..DuoLimits::default() },
        )
        .unwrap();
        let (status, rounds) = if failures < max_rounds {
            (DuoStatus::ExecutedClean, failures + 1)
        } else {
            (DuoStatus::ExhaustedRounds, max_rounds)
        };
        assert_eq!((out.status, out.rounds_used), (status, rounds), "case {case}");
        assert_eq!(ep.call_count() as u32, rounds);
        // strict alternation after the prompt: code, report, code, report, ...
        let msgs = s.transcript().messages();
        assert_eq!(msgs.len() as u32, 1 + 2 * rounds);
        assert_eq!((msgs[0].sender.as_str(), msgs[0].kind), ("user", MessageKind::Text));
        for (i, m) in msgs[1..].iter().enumerate() {
            let want =
                if i % 2 == 0 { ("fenics_coder", MessageKind::Code) } else { ("executor", MessageKind::ExecReport) };
            assert_eq!((m.sender.as_str(), m.kind), want, "case {case} message {}", i + 1);
        }
        let terminal =
            if status == DuoStatus::ExecutedClean { TranscriptStatus::Succeeded } else { TranscriptStatus::Exhausted };
        assert_eq!(s.transcript().status(), terminal);
    }

    // session token budget: one failing round spends more than a 1-token budget
    let ep = ScriptedEndpoint::new().reply(fenced("FAIL")).reply(fenced("print('ok')"));
    let mut s = duo_session("duo-tokens");
    let out = run_duo(
        &mut s,
        "Solve.",
        &coder,
        &ep,
        &FailMarker,
        DuoLimits { session_token_budget: 1, ..DuoLimits::default() },
    )
    .unwrap();
    assert_eq!((out.status, out.rounds_used), (DuoStatus::ExhaustedTokens, 1));
    assert_eq!(s.transcript().status(), TranscriptStatus::Exhausted);
    // a reply cut off at the output limit also ends the session on tokens
    let ep = ScriptedEndpoint::new().reply_with("```python\nprint(", FinishReason::Length);
    let mut s = duo_session("duo-length");
    let out = run_duo(&mut s, "Solve.", &coder, &ep, &FailMarker, DuoLimits::default()).unwrap();
    assert_eq!((out.status, out.rounds_used), (DuoStatus::ExhaustedTokens, 0));

    // byte-identical replay of a scripted session, and through the JSONL reader
    let run = || {
        let ep = ScriptedEndpoint::new().reply(fenced("FAIL a")).reply(fenced("FAIL b")).reply(fenced("print('ok')"));
        let mut s = duo_session("duo-replay");
        let out = run_duo(&mut s, "Solve.", &coder, &ep, &FailMarker, DuoLimits::default()).unwrap();
        (serde_json::to_string(&out).unwrap(), s.transcript().to_jsonl())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let reread = Transcript::read_jsonl(a.1.as_bytes()).unwrap();
    assert_eq!(reread.to_jsonl(), a.1);
    "200 random scenarios alternate and honour the round cap; token exhaustion; replay identical".into()
}

fn orchestra_roster(scripts: Vec<(Role, Arc<dyn ChatEndpoint>)>, admin: Arc<dyn AdminChannel>) -> Roster {
    let llm = [Role::Coordinator, Role::Planner, Role::Formulator, Role::Coder, Role::Corrector, Role::Evaluator];
    let mut reg = EndpointRegistry::new();
    for r in llm {
        reg.insert(r.name(), Arc::new(FnEndpoint::text(|_| "noted".into())));
    }
    for (r, ep) in scripts {
        reg.insert(r.name(), ep);
    }
    let mut roster = Roster::uniform("unused", reg, Arc::new(FailMarker), admin);
    roster.coordinator = AgentSpec::for_role(Role::Coordinator, Some("coordinator".into()));
    roster.planner = AgentSpec::for_role(Role::Planner, Some("planner".into()));
    roster.formulator = AgentSpec::for_role(Role::Formulator, Some("formulator".into()));
    roster.coder = AgentSpec::for_role(Role::Coder, Some("coder".into()));
    roster.corrector = AgentSpec::for_role(Role::Corrector, Some("corrector".into()));
    roster.evaluator = AgentSpec::for_role(Role::Evaluator, Some("evaluator".into()));
    roster
}

/// Pops replies in order, then repeats `default`.
fn queue(replies: Vec<String>, default: &'static str) -> Arc<dyn ChatEndpoint> {
    let q = Mutex::new(replies.into_iter().rev().collect::<Vec<_>>());
    Arc::new(FnEndpoint::text(move |_| q.lock().unwrap().pop().unwrap_or_else(|| default.to_string())))
}

fn orchestra_session(id: &str) -> Session {
    Session::new(id, Role::ALL.iter().map(|r| r.name().to_string()).collect()).with_clock(Arc::new(FixedClock::epoch()))
}

/// Protocol rules checked straight from the transcript.
fn orchestra_rule_breaks(t: &Transcript) -> Vec<String> {
    let mut out = Vec::new();
    let mut in_coder_loop = false;
    let msgs = t.messages();
    for (i, m) in msgs.iter().enumerate() {
        match m.sender.as_str() {
            "coordinator" => in_coder_loop = false,
            "coder" => in_coder_loop = true,
            "executor" | "corrector" if !in_coder_loop => {
                out.push(format!("{} at seq {} outside a coder loop", m.sender, m.seq))
            }
            "admin" if i == 0 || msgs[i - 1].sender != "evaluator" => {
                out.push(format!("admin at seq {} does not follow the evaluator", m.seq))
            }
            _ => {}
        }
    }
    out
}

fn orchestra_protocol() -> String {
    let code_ok = fenced("from dolfin import *\nprint('ok')");
    let code_bad = fenced("FAIL");
    let roster = orchestra_roster(
        vec![
            (
                Role::Coordinator,
                queue(vec!["planner".into(), "formulator".into(), "coder".into(), "evaluator".into()], "evaluator"),
            ),
            (Role::Coder, queue(vec![code_bad.clone(), code_ok.clone()], "none")),
            (Role::Corrector, queue(vec![], "Remove the FAIL line.")),
            (Role::Evaluator, queue(vec![], "The plot matches.\nSATISFIED")),
        ],
        Arc::new(ScriptedAdmin::decisions([Decision::Exit])),
    );
    let mut s = orchestra_session("walk");
    let out = run_orchestra(&mut s, "Solve the Poisson problem.", &roster, OrchestraLimits::default()).unwrap();
    let speakers: Vec<&str> = s.transcript().messages().iter().map(|m| m.sender.as_str()).collect();
    let acting: Vec<&str> = speakers.iter().copied().filter(|x| *x != "coordinator" && *x != "user").collect();
    assert_eq!(
        acting,
        ["planner", "formulator", "coder", "executor", "corrector", "coder", "executor", "evaluator", "admin"]
    );
    assert_eq!(out.status, OrchestraStatus::TerminatedByAdmin);
    assert_eq!(s.transcript().status(), TranscriptStatus::TerminatedByAdmin);
    assert!(orchestra_rule_breaks(s.transcript()).is_empty());

    // a coordinator that never calls the evaluator runs into the selection cap
    let roster = orchestra_roster(vec![(Role::Coordinator, queue(vec![], "planner"))], Arc::new(Headless));
    let mut s = orchestra_session("cap");
    let limits = OrchestraLimits { max_selections: 12, ..OrchestraLimits::default() };
    let out = run_orchestra(&mut s, "p", &roster, limits).unwrap();
    assert_eq!((out.status, out.selections), (OrchestraStatus::Exhausted, 12));
    assert_eq!(s.transcript().status(), TranscriptStatus::Exhausted);

    // random coordinators, coders, evaluators and admins
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let picks = ["planner", "formulator", "coder", "evaluator", "executor", "admin", "??"];
    let evals = ["SATISFIED", "not yet", "redo the mesh"];
    let mut statuses: BTreeMap<String, usize> = BTreeMap::new();
    for case in 0..150 {
        let mut pick = |options: &[&str], n: usize| -> Vec<String> {
            (0..n).map(|_| options[rng.random_range(0..options.len())].to_string()).collect()
        };
        let coord = pick(&picks, 30);
        let codes = pick(&[code_ok.as_str(), code_bad.as_str(), "no code"], 12);
        let verdicts = pick(&evals, 8);
        let admin: Vec<Option<Decision>> = (0..6)
            .map(|_| match rng.random_range(0..3) {
                0 => None,
                1 => Some(Decision::Continue),
                _ => Some(Decision::Exit),
            })
            .collect();
        let limits = OrchestraLimits {
            max_selections: rng.random_range(1..25),
            max_rounds: rng.random_range(1..4),
            ..OrchestraLimits::default()
        };
        let roster = orchestra_roster(
            vec![
                (Role::Coordinator, queue(coord, "evaluator")),
                (Role::Coder, queue(codes, "no code")),
                (Role::Evaluator, queue(verdicts, "no")),
            ],
            Arc::new(ScriptedAdmin::new(admin)),
        );
        let mut s = orchestra_session(&format!("rand-{case}"));
        let out = run_orchestra(&mut s, "p", &roster, limits).unwrap();
        let breaks = orchestra_rule_breaks(s.transcript());
        assert!(breaks.is_empty(), "case {case}: {breaks:?}");
        assert!(out.selections <= limits.max_selections);
        assert!(s.transcript().status().is_terminal());
        let exited =
            s.transcript().messages().last().is_some_and(|m| m.sender == "admin" && m.content.contains("\"exit\""));
        assert_eq!(out.status == OrchestraStatus::TerminatedByAdmin, exited, "case {case}");
        *statuses.entry(serde_json::to_value(out.status).unwrap().as_str().unwrap().to_string()).or_default() += 1;
    }
    format!("full walk ordered; cap enforced; 150 random sessions clean {statuses:?}")
}

fn baseline_isolation() -> String {
    let coder = baseline_coder("scripted");
    let clock: Arc<dyn femagent_core::Clock> = Arc::new(FixedClock::epoch());
    let prompt = "Solve the heat equation on the unit square.";

    // attempt 1 fails, attempt 2 is final
    let marker = "ATTEMPT_ONE_ONLY_7f3c";
    let ep = ScriptedEndpoint::new().reply(fenced(&format!("FAIL  # {marker}"))).reply(fenced("print('second')"));
    let out = run_baseline_two_shot(prompt, &coder, &ep, &FailMarker, "b1", clock.clone(), 8192);
    assert_eq!(out.attempts.len(), 2);
    assert_eq!(ep.call_count(), 2);
    assert_eq!(out.final_attempt().final_code.as_ref().unwrap().source, "print('second')");
    assert!(out.executable());
    let calls = ep.calls();
    assert_eq!(calls[0], calls[1], "both attempts must see the same fresh prompt");
    // byte audit: nothing the first session produced appears in the second
    let (t1, t2) = (&out.transcripts[0], &out.transcripts[1]);
    let second = t2.to_jsonl();
    assert!(!second.contains(marker));
    for m in t1.messages().iter().filter(|m| m.sender != "user") {
        assert!(!second.contains(&serde_json::to_string(&m.content).unwrap()), "leaked: {}", m.content);
    }
    assert!(!serde_json::to_string(&calls[1]).unwrap().contains(marker));
    audit_isolation(t1, t2).unwrap();

    // attempt 1 executes: it is final and no second call is made
    let ep = ScriptedEndpoint::new().reply(fenced("print('first')")).reply(fenced("print('unused')"));
    let out = run_baseline_two_shot(prompt, &coder, &ep, &FailMarker, "b2", clock.clone(), 8192);
    assert_eq!((out.attempts.len(), ep.call_count()), (1, 1));
    assert_eq!(out.final_attempt().final_code.as_ref().unwrap().source, "print('first')");

    // both fail: the second attempt's code is final and not executable
    let ep = ScriptedEndpoint::new().reply(fenced("FAIL 1")).reply(fenced("FAIL 2"));
    let out = run_baseline_two_shot(prompt, &coder, &ep, &FailMarker, "b3", clock, 8192);
    assert_eq!(out.final_attempt().final_code.as_ref().unwrap().source, "FAIL 2");
    assert!(!out.executable());
    "no bytes of attempt 1 reach attempt 2; final-code selection holds in all three cases".into()
}

fn to_na(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn lora_math() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=16);
        let k = rng.random_range(1..=16);
        let r = rng.random_range(1..=d.min(k));
        let alpha = rng.random_range(0.5..64.0);
        let w0 = random(&mut rng, d, k);
        let (b, a) = (random(&mut rng, d, r), random(&mut rng, r, k));
        let x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let adapter = AdapterPair::new(b.clone(), a.clone(), alpha).unwrap();

        // merged path versus two-path forward, against an independent product
        let h = forward_two_path(&w0, &adapter, &x).unwrap();
        let oracle =
            (to_na(&w0) + to_na(&b) * to_na(&a) * (alpha / r as f64)) * nalgebra::DVector::from_column_slice(&x);
        let merged = merge_adapter(&w0, &adapter).unwrap().mul_vec(&x).unwrap();
        let scale = oracle.amax().max(1e-300);
        for i in 0..d {
            let e = (h[i] - oracle[i]).abs().max((merged[i] - oracle[i]).abs()) / scale;
            worst = worst.max(e);
        }

        // rank of the update never exceeds r
        let delta = to_na(&adapter.delta());
        assert!(delta.rank(1e-9 * delta.amax().max(1e-300)) <= r);

        // zero-padding to rank 2r with doubled alpha leaves the update unchanged
        let b2 = Matrix::from_fn(d, 2 * r, |i, j| if j < r { b.get(i, j) } else { 0.0 });
        let a2 = Matrix::from_fn(2 * r, k, |i, j| if i < r { a.get(i, j) } else { 0.0 });
        if 2 * r <= d.min(k) {
            let wide = AdapterPair::new(b2, a2, 2.0 * alpha).unwrap();
            let gap = (to_na(&wide.delta()) - &delta).amax();
            assert!(gap <= 1e-12 * delta.amax().max(1.0), "padding changed the update by {gap}");
        }
    }
    assert!(worst <= 1e-12, "two-path disagreement {worst:e}");

    let count = trainable_param_count(4096, 4096, 8);
    assert_eq!(count.adapter, 8 * (4096 + 4096));
    assert_eq!(count.adapter, 65_536);

    // 4-bit block round trip
    let mut worst_ratio = 0.0f64;
    for _ in 0..10_000 {
        let magnitude = 10f64.powi(rng.random_range(-4..4));
        let block: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0) * magnitude).collect();
        let absmax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let back = BlockQuantized::quantize(&block, QuantSpec { block_size: 32 }).dequantize();
        let err = block.iter().zip(&back).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let bound = absmax / 14.0;
        assert!(err <= bound * (1.0 + 1e-12), "block error {err} above {bound}");
        worst_ratio = worst_ratio.max(err / bound);
    }
    format!("1000 shapes, worst relative gap {worst:.1e}; 65,536 params; 10,000 blocks within bound (worst {worst_ratio:.3} of it)")
}

fn kfold() -> String {
    let records: Vec<AlpacaRecord> =
        (0..1004).map(|i| AlpacaRecord::new(format!("Write solver {i}"), "", format!("print({i})"))).collect();
    let folds = kfold_split(&records, 5, 42).unwrap();
    let mut sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, [200, 201, 201, 201, 201]);
    assert_eq!(folds, kfold_split(&records, 5, 42).unwrap());
    let idx = kfold_indices(1004, 5, 42).unwrap();
    assert_eq!(idx, kfold_indices(1004, 5, 42).unwrap());
    let all: BTreeSet<usize> = idx.iter().flatten().copied().collect();
    assert_eq!(all, (0..1004).collect::<BTreeSet<_>>());
    assert_eq!(idx.iter().map(Vec::len).sum::<usize>(), 1004);
    format!("fold sizes {sizes:?}; same seed, same folds")
}

fn sandbox() -> String {
    let tmp = tempfile::tempdir().unwrap();
    let sh = |t: u64| {
        SandboxConfig::new(tmp.path().join("runs"))
            .with_command(&["sh", "{script}"])
            .with_timeout(Duration::from_secs(t))
    };

    let start = Instant::now();
    let r = Sandbox::new(sh(2)).execute(&CodeBlock::new("sleep 30"));
    let wall = start.elapsed().as_secs_f64();
    assert_eq!(r.exit_status, ExitStatus::Timeout);
    assert!((r.duration_secs - 2.0).abs() <= 0.5, "reported {}", r.duration_secs);
    assert!((wall - 2.0).abs() <= 0.5, "wall {wall}");
    let timed_out_after = r.duration_secs;

    // a script that plants links out of its workspace
    let outside = tmp.path().join("secret.txt");
    std::fs::write(&outside, "secret").unwrap();
    let script = format!(
        "echo own > own.txt\nln -s {} leak.txt\nmkdir d\nln -s {} d/dir_leak\necho b > z.csv\necho a > a.csv",
        outside.display(),
        tmp.path().display()
    );
    let r = Sandbox::new(sh(20)).execute(&CodeBlock::new(script.clone()));
    assert!(r.is_success(), "{}", r.stderr);
    let names: Vec<&str> = r.artifacts.iter().map(|a| a.relative_path.as_str()).collect();
    assert_eq!(names, ["a.csv", "own.txt", "z.csv"]);
    let ws = r.workspace.clone().unwrap();
    let rescan = collect_artifacts(&ws, &["**/*".to_string(), "*".to_string()]);
    assert!(rescan.artifacts.iter().all(|a| !a.relative_path.contains("leak")));

    // same script twice: same order and hashes
    let again = Sandbox::new(sh(20)).execute(&CodeBlock::new(script));
    let key = |r: &ExecutionReport| {
        r.artifacts.iter().map(|a| (a.relative_path.clone(), a.content_hash.clone())).collect::<Vec<_>>()
    };
    assert_eq!(key(&r), key(&again));
    format!("timeout after {timed_out_after:.2}s (limit 2s); escaping links excluded; artifact order stable")
}

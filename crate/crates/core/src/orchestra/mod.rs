//! The eight-role group chat.
//!
//! A coordinator picks the next speaker among planner, formulator, coder and
//! evaluator. Picking the coder starts an inner coder/executor/corrector loop;
//! picking the evaluator is followed by an admin gate that either ends the
//! session or hands the floor back to the coordinator. Explicit caps keep a
//! coordinator that never calls the evaluator from running forever.

mod admin;
pub mod audit;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use admin::{
    AdminChannel, AutoPolicy, Decision, DecisionSource, GateDecision, GateRequest, Headless, ScriptedAdmin,
    TerminalAdmin,
};

use crate::chat::{CodeBlock, MessageKind, TranscriptStatus};
use crate::duo::{coder_turn, post_reply, CoderTurn, DEFAULT_CONTEXT_WINDOW, DEFAULT_MAX_ROUNDS};
use crate::gateway::{ChatEndpoint, EndpointRegistry, GatewayError};
use crate::roles::{AgentKind, AgentSpec, Role, RoleError, USER};
use crate::sandbox::{CodeRunner, ExecutionReport};
use crate::session::{Session, SessionError};

pub const DEFAULT_MAX_SELECTIONS: u32 = 24;
pub const DEFAULT_MAX_CODER_LOOPS: u32 = 3;
pub const DEFAULT_SESSION_TOKEN_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestraLimits {
    /// Coordinator selections per session.
    pub max_selections: u32,
    /// Entries into the coder/executor/corrector loop per session.
    pub max_coder_loops: u32,
    /// Executor runs per coder-loop entry.
    pub max_rounds: u32,
    pub session_token_budget: u64,
    pub context_window: usize,
}

impl Default for OrchestraLimits {
    fn default() -> Self {
        Self {
            max_selections: DEFAULT_MAX_SELECTIONS,
            max_coder_loops: DEFAULT_MAX_CODER_LOOPS,
            max_rounds: DEFAULT_MAX_ROUNDS,
            session_token_budget: DEFAULT_SESSION_TOKEN_BUDGET,
            context_window: DEFAULT_CONTEXT_WINDOW,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestraError {
    #[error(transparent)]
    Role(#[from] RoleError),
    #[error("roster slot `{slot}` holds agent `{name}`")]
    MisplacedAgent { slot: &'static str, name: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("limits must be strictly positive")]
    InvalidLimits,
}

/// The LLM-backed agents plus the executor and admin proxies.
#[derive(Clone)]
pub struct Roster {
    pub coordinator: AgentSpec,
    pub planner: AgentSpec,
    pub formulator: AgentSpec,
    pub coder: AgentSpec,
    pub corrector: AgentSpec,
    pub evaluator: AgentSpec,
    pub endpoints: EndpointRegistry,
    pub executor: Arc<dyn CodeRunner>,
    pub admin: Arc<dyn AdminChannel>,
    pub auto_policy: AutoPolicy,
}

impl std::fmt::Debug for Roster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Roster").field("endpoints", &self.endpoints).field("auto_policy", &self.auto_policy).finish()
    }
}

/// Serializable roster description: which endpoint backs each role and any
/// prompt overrides. Roles without an entry use `default_endpoint`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RosterConfig {
    pub default_endpoint: String,
    pub agents: BTreeMap<String, AgentOverride>,
    pub auto_policy: AutoPolicy,
    pub limits: OrchestraLimits,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentOverride {
    pub endpoint: Option<String>,
    pub system_prompt: Option<String>,
}

impl RosterConfig {
    pub fn agent(&self, role: Role) -> Result<AgentSpec, RoleError> {
        let o = self.agents.get(role.name()).cloned().unwrap_or_default();
        let mut spec = AgentSpec::for_role(role, Some(o.endpoint.unwrap_or_else(|| self.default_endpoint.clone())));
        if let Some(p) = o.system_prompt {
            spec.system_prompt = p;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn build(
        &self,
        endpoints: EndpointRegistry,
        executor: Arc<dyn CodeRunner>,
        admin: Arc<dyn AdminChannel>,
    ) -> Result<Roster, OrchestraError> {
        for name in self.agents.keys() {
            let role: Role = name.parse()?;
            if role.kind() == AgentKind::UserProxy {
                return Err(RoleError::UnexpectedEndpoint(name.clone()).into());
            }
        }
        let roster = Roster {
            coordinator: self.agent(Role::Coordinator)?,
            planner: self.agent(Role::Planner)?,
            formulator: self.agent(Role::Formulator)?,
            coder: self.agent(Role::Coder)?,
            corrector: self.agent(Role::Corrector)?,
            evaluator: self.agent(Role::Evaluator)?,
            endpoints,
            executor,
            admin,
            auto_policy: self.auto_policy.clone(),
        };
        roster.validate()?;
        Ok(roster)
    }
}

impl Roster {
    /// All six LLM roles on one endpoint with the shipped prompts.
    pub fn uniform(
        endpoint: &str,
        endpoints: EndpointRegistry,
        executor: Arc<dyn CodeRunner>,
        admin: Arc<dyn AdminChannel>,
    ) -> Self {
        let spec = |r| AgentSpec::for_role(r, Some(endpoint.to_string()));
        Self {
            coordinator: spec(Role::Coordinator),
            planner: spec(Role::Planner),
            formulator: spec(Role::Formulator),
            coder: spec(Role::Coder),
            corrector: spec(Role::Corrector),
            evaluator: spec(Role::Evaluator),
            endpoints,
            executor,
            admin,
            auto_policy: AutoPolicy::default(),
        }
    }

    fn slots(&self) -> [(&'static str, &AgentSpec); 6] {
        [
            ("coordinator", &self.coordinator),
            ("planner", &self.planner),
            ("formulator", &self.formulator),
            ("coder", &self.coder),
            ("corrector", &self.corrector),
            ("evaluator", &self.evaluator),
        ]
    }

    pub fn validate(&self) -> Result<(), OrchestraError> {
        for (slot, spec) in self.slots() {
            if spec.name != slot {
                return Err(OrchestraError::MisplacedAgent { slot, name: spec.name.clone() });
            }
            spec.validate()?;
            self.endpoints.get(spec.endpoint.as_deref().unwrap_or_default())?;
        }
        Ok(())
    }

    /// All eight role names, in canonical order.
    pub fn names(&self) -> Vec<String> {
        Role::ALL.iter().map(|r| r.name().to_string()).collect()
    }

    pub fn spec(&self, role: Role) -> Option<&AgentSpec> {
        match role {
            Role::Coordinator => Some(&self.coordinator),
            Role::Planner => Some(&self.planner),
            Role::Formulator => Some(&self.formulator),
            Role::Coder => Some(&self.coder),
            Role::Corrector => Some(&self.corrector),
            Role::Evaluator => Some(&self.evaluator),
            Role::Executor | Role::Admin => None,
        }
    }

    fn endpoint_of(&self, spec: &AgentSpec) -> Result<Arc<dyn ChatEndpoint>, GatewayError> {
        self.endpoints.get(spec.endpoint.as_deref().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionSource {
    Coordinator,
    Fallback,
}

/// Content of the coordinator's control message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub next: Role,
    pub source: SelectionSource,
}

/// Content of the admin's control message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateRecord {
    pub decision: Decision,
    pub source: DecisionSource,
}

const SELECT_INSTRUCTION: &str =
    "Who should speak next? Reply with exactly one of: planner, formulator, coder, evaluator.";

fn parse_selection(reply: &str) -> Option<Role> {
    reply.trim().to_lowercase().parse::<Role>().ok().filter(|r| r.coordinator_eligible())
}

/// First selectable role that has not spoken yet, else the evaluator.
pub fn fallback_selection(session: &Session) -> Role {
    let msgs = session.transcript().messages();
    Role::SELECTABLE.into_iter().find(|r| !msgs.iter().any(|m| m.sender == r.name())).unwrap_or(Role::Evaluator)
}

/// Asks the coordinator who speaks next; one re-ask, then the static fallback.
pub fn coordinator_select(
    session: &mut Session,
    roster: &Roster,
    limits: &OrchestraLimits,
) -> Result<Selection, SessionError> {
    let ep = roster.endpoint_of(&roster.coordinator)?;
    let mut instruction = SELECT_INSTRUCTION.to_string();
    for _ in 0..2 {
        let reply = session.ask(&roster.coordinator, ep.as_ref(), limits.context_window, Some(&instruction))?;
        if let Some(role) = parse_selection(&reply.content) {
            return Ok(Selection { next: role, source: SelectionSource::Coordinator });
        }
        let shown: String = reply.content.trim().chars().take(40).collect();
        instruction = format!("`{shown}` is not a valid choice. {SELECT_INSTRUCTION}");
    }
    Ok(Selection { next: fallback_selection(session), source: SelectionSource::Fallback })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopResult {
    Clean,
    Exhausted,
    NoCode,
}

/// What the inner loop leaves behind for the session.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub result: LoopResult,
    pub rounds: u32,
    pub last_code: Option<CodeBlock>,
    pub last_report: Option<ExecutionReport>,
    pub budget_spent: bool,
}

/// coder -> executor -> (corrector -> coder -> executor)* until a clean run,
/// `max_rounds` executor runs, or the token budget is spent.
pub fn coder_exec_correct_loop(
    session: &mut Session,
    roster: &Roster,
    limits: &OrchestraLimits,
) -> Result<LoopOutcome, SessionError> {
    let coder_ep = roster.endpoint_of(&roster.coder)?;
    let corrector_ep = roster.endpoint_of(&roster.corrector)?;
    let executor = Role::Executor.name();
    let mut out = LoopOutcome {
        result: LoopResult::Exhausted,
        rounds: 0,
        last_code: None,
        last_report: None,
        budget_spent: false,
    };
    loop {
        if out.rounds >= limits.max_rounds {
            return Ok(out);
        }
        if session.usage().totals().total_tokens() >= limits.session_token_budget {
            out.budget_spent = true;
            return Ok(out);
        }
        let code = match coder_turn(session, &roster.coder, coder_ep.as_ref(), limits.context_window, executor)? {
            CoderTurn::Code(c) => c,
            CoderTurn::Truncated => return Ok(out),
            CoderTurn::NoCode => {
                out.result = LoopResult::NoCode;
                return Ok(out);
            }
        };
        let report = roster.executor.run(&code);
        out.rounds += 1;
        session.post(executor, MessageKind::ExecReport, report.to_json())?;
        let clean = report.is_success();
        out.last_code = Some(code);
        out.last_report = Some(report);
        if clean {
            out.result = LoopResult::Clean;
            return Ok(out);
        }
        if out.rounds >= limits.max_rounds {
            return Ok(out);
        }
        let reply = session.ask(&roster.corrector, corrector_ep.as_ref(), limits.context_window, None)?;
        session.post(&roster.corrector.name, MessageKind::Text, reply.content)?;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrchestraStatus {
    TerminatedByAdmin,
    Exhausted,
    Failed,
}

impl OrchestraStatus {
    pub fn transcript_status(self) -> TranscriptStatus {
        match self {
            OrchestraStatus::TerminatedByAdmin => TranscriptStatus::TerminatedByAdmin,
            OrchestraStatus::Exhausted => TranscriptStatus::Exhausted,
            OrchestraStatus::Failed => TranscriptStatus::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrchestraOutcome {
    pub status: OrchestraStatus,
    pub final_code: Option<CodeBlock>,
    pub final_report: Option<ExecutionReport>,
    pub transcript_ref: String,
    pub gate_history: Vec<GateDecision>,
    pub selections: u32,
    pub coder_loops: u32,
    /// Which cap ended an exhausted session, or the error behind a failed one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Evaluator has spoken; ask the admin (or the auto-policy) whether to stop.
pub fn evaluator_admin_gate(
    session: &mut Session,
    roster: &Roster,
    visit: u32,
    evaluator_message: &str,
    last_code: Option<&CodeBlock>,
    last_report: Option<&ExecutionReport>,
) -> Result<GateDecision, SessionError> {
    let req = GateRequest {
        session_id: session.id().to_string(),
        visit,
        evaluator_message: evaluator_message.to_string(),
        has_code: last_code.is_some(),
        last_exit_status: last_report.map(|r| r.exit_status.clone()),
        artifacts: last_report
            .map(|r| r.artifacts.iter().map(|a| a.relative_path.clone()).collect())
            .unwrap_or_default(),
        requested_at: session.clock().now(),
    };
    let (decision, source) = match roster.admin.request(&req) {
        Some(d) => (d, DecisionSource::Human),
        None => (roster.auto_policy.decide(&req), DecisionSource::AutoPolicy),
    };
    let gate = GateDecision { decision, decided_at: session.clock().now(), source };
    let record = serde_json::to_string(&GateRecord { decision, source }).expect("serializes");
    session.post(Role::Admin.name(), MessageKind::Control, record)?;
    Ok(gate)
}

/// Runs a full multi-agent session on an empty `session`.
pub fn run_orchestra(
    session: &mut Session,
    problem_prompt: &str,
    roster: &Roster,
    limits: OrchestraLimits,
) -> Result<OrchestraOutcome, OrchestraError> {
    if limits.max_selections == 0
        || limits.max_coder_loops == 0
        || limits.max_rounds == 0
        || limits.session_token_budget == 0
    {
        return Err(OrchestraError::InvalidLimits);
    }
    roster.validate()?;
    let mut out = OrchestraOutcome {
        status: OrchestraStatus::Failed,
        final_code: None,
        final_report: None,
        transcript_ref: session.id().to_string(),
        gate_history: Vec::new(),
        selections: 0,
        coder_loops: 0,
        reason: None,
    };

    let result: Result<OrchestraStatus, SessionError> = (|| {
        session.post(USER, MessageKind::Text, problem_prompt)?;
        loop {
            if out.selections >= limits.max_selections {
                out.reason = Some(format!("coordinator selection cap ({}) reached", limits.max_selections));
                return Ok(OrchestraStatus::Exhausted);
            }
            if session.usage().totals().total_tokens() >= limits.session_token_budget {
                out.reason = Some("session token budget spent".into());
                return Ok(OrchestraStatus::Exhausted);
            }
            let sel = coordinator_select(session, roster, &limits)?;
            out.selections += 1;
            session.post(
                Role::Coordinator.name(),
                MessageKind::Control,
                serde_json::to_string(&sel).expect("serializes"),
            )?;

            match sel.next {
                Role::Coder => {
                    if out.coder_loops >= limits.max_coder_loops {
                        out.reason = Some(format!("coder loop cap ({}) reached", limits.max_coder_loops));
                        return Ok(OrchestraStatus::Exhausted);
                    }
                    out.coder_loops += 1;
                    let lo = coder_exec_correct_loop(session, roster, &limits)?;
                    if lo.last_code.is_some() {
                        out.final_code = lo.last_code;
                        out.final_report = lo.last_report;
                    }
                    if lo.budget_spent {
                        out.reason = Some("session token budget spent".into());
                        return Ok(OrchestraStatus::Exhausted);
                    }
                }
                Role::Evaluator => {
                    let ep = roster.endpoint_of(&roster.evaluator)?;
                    let reply = session.ask(&roster.evaluator, ep.as_ref(), limits.context_window, None)?;
                    let text = reply.content.clone();
                    post_reply(session, &roster.evaluator.name, reply.content)?;
                    let visit = out.gate_history.len() as u32 + 1;
                    let gate = evaluator_admin_gate(
                        session,
                        roster,
                        visit,
                        &text,
                        out.final_code.as_ref(),
                        out.final_report.as_ref(),
                    )?;
                    out.gate_history.push(gate.clone());
                    if gate.decision == Decision::Exit {
                        return Ok(OrchestraStatus::TerminatedByAdmin);
                    }
                }
                role => {
                    let spec = roster.spec(role).expect("selectable roles are LLM-backed");
                    let ep = roster.endpoint_of(spec)?;
                    let reply = session.ask(spec, ep.as_ref(), limits.context_window, None)?;
                    post_reply(session, &spec.name, reply.content)?;
                }
            }
        }
    })();

    out.status = match result {
        Ok(s) => s,
        Err(e) => {
            out.reason = Some(e.to_string());
            OrchestraStatus::Failed
        }
    };
    let _ = session.finish(out.status.transcript_status());
    Ok(out)
}

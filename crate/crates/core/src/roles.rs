//! Agent roles and their static properties.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Sender name used for the problem statement that opens every session.
pub const USER: &str = "user";

/// The eight roles of the multi-agent group chat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Coordinator,
    Planner,
    Formulator,
    Coder,
    Executor,
    Corrector,
    Evaluator,
    Admin,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::Coordinator,
        Role::Planner,
        Role::Formulator,
        Role::Coder,
        Role::Executor,
        Role::Corrector,
        Role::Evaluator,
        Role::Admin,
    ];

    /// Roles the coordinator may hand the floor to, in static fallback order.
    pub const SELECTABLE: [Role; 4] = [Role::Planner, Role::Formulator, Role::Coder, Role::Evaluator];

    pub fn name(self) -> &'static str {
        match self {
            Role::Coordinator => "coordinator",
            Role::Planner => "planner",
            Role::Formulator => "formulator",
            Role::Coder => "coder",
            Role::Executor => "executor",
            Role::Corrector => "corrector",
            Role::Evaluator => "evaluator",
            Role::Admin => "admin",
        }
    }

    pub fn coordinator_eligible(self) -> bool {
        Self::SELECTABLE.contains(&self)
    }

    pub fn kind(self) -> AgentKind {
        match self {
            Role::Coordinator => AgentKind::Manager,
            Role::Executor | Role::Admin => AgentKind::UserProxy,
            _ => AgentKind::Assistant,
        }
    }

    /// Shipped system prompt for LLM-backed roles.
    pub fn default_system_prompt(self) -> &'static str {
        match self {
            Role::Coordinator => include_str!("../prompts/coordinator.txt"),
            Role::Planner => include_str!("../prompts/planner.txt"),
            Role::Formulator => include_str!("../prompts/formulator.txt"),
            Role::Coder => include_str!("../prompts/coder.txt"),
            Role::Corrector => include_str!("../prompts/corrector.txt"),
            Role::Evaluator => include_str!("../prompts/evaluator.txt"),
            Role::Executor | Role::Admin => "",
        }
    }
}

/// System prompt of the coder in the two-agent loop.
pub const DUO_CODER_PROMPT: &str = include_str!("../prompts/duo_coder.txt");

/// System prompt of each zero-shot baseline attempt.
pub const BASELINE_PROMPT: &str = include_str!("../prompts/baseline.txt");

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = RoleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| RoleError::UnknownRole(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Assistant,
    UserProxy,
    Manager,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RoleError {
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("agent `{0}` is LLM-backed and needs an endpoint")]
    MissingEndpoint(String),
    #[error("user-proxy agent `{0}` must not carry an endpoint")]
    UnexpectedEndpoint(String),
    #[error("agent `{name}` has coordinator_eligible={got}, role requires {expected}")]
    Eligibility { name: String, got: bool, expected: bool },
    #[error("agent `{name}` has kind {got:?}, role requires {expected:?}")]
    WrongKind { name: String, got: AgentKind, expected: AgentKind },
}

/// Definition of one participant in a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub kind: AgentKind,
    pub system_prompt: String,
    /// Name of an endpoint in the endpoint registry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub coordinator_eligible: bool,
}

impl AgentSpec {
    pub fn assistant(name: impl Into<String>, system_prompt: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: AgentKind::Assistant,
            system_prompt: system_prompt.into(),
            endpoint: Some(endpoint.into()),
            coordinator_eligible: false,
        }
    }

    /// Spec for one of the built-in roles with its shipped prompt.
    pub fn for_role(role: Role, endpoint: Option<String>) -> Self {
        Self {
            name: role.name().to_string(),
            kind: role.kind(),
            system_prompt: role.default_system_prompt().to_string(),
            endpoint,
            coordinator_eligible: role.coordinator_eligible(),
        }
    }

    pub fn role(&self) -> Option<Role> {
        self.name.parse().ok()
    }

    pub fn is_llm_backed(&self) -> bool {
        matches!(self.kind, AgentKind::Assistant | AgentKind::Manager)
    }

    pub fn validate(&self) -> Result<(), RoleError> {
        match (self.is_llm_backed(), &self.endpoint) {
            (true, None) => return Err(RoleError::MissingEndpoint(self.name.clone())),
            (false, Some(_)) => return Err(RoleError::UnexpectedEndpoint(self.name.clone())),
            _ => {}
        }
        if let Some(role) = self.role() {
            if role.kind() != self.kind {
                return Err(RoleError::WrongKind { name: self.name.clone(), got: self.kind, expected: role.kind() });
            }
            if role.coordinator_eligible() != self.coordinator_eligible {
                return Err(RoleError::Eligibility {
                    name: self.name.clone(),
                    got: self.coordinator_eligible,
                    expected: role.coordinator_eligible(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eligibility_split() {
        let eligible: Vec<_> = Role::ALL.into_iter().filter(|r| r.coordinator_eligible()).collect();
        assert_eq!(eligible, vec![Role::Planner, Role::Formulator, Role::Coder, Role::Evaluator]);
        for r in [Role::Executor, Role::Corrector, Role::Admin, Role::Coordinator] {
            assert!(!r.coordinator_eligible(), "{r}");
        }
    }

    #[test]
    fn role_names_round_trip() {
        for r in Role::ALL {
            assert_eq!(r.name().parse::<Role>().unwrap(), r);
        }
        assert!("fenics coder".parse::<Role>().is_err());
    }

    #[test]
    fn endpoint_rules() {
        let mut coder = AgentSpec::for_role(Role::Coder, Some("ft".into()));
        assert!(coder.validate().is_ok());
        coder.endpoint = None;
        assert_eq!(coder.validate(), Err(RoleError::MissingEndpoint("coder".into())));

        let exec = AgentSpec::for_role(Role::Executor, None);
        assert!(exec.validate().is_ok());
        let bad = AgentSpec { endpoint: Some("x".into()), ..exec };
        assert!(matches!(bad.validate(), Err(RoleError::UnexpectedEndpoint(_))));

        let mut corrector = AgentSpec::for_role(Role::Corrector, Some("ft".into()));
        corrector.coordinator_eligible = true;
        assert!(matches!(corrector.validate(), Err(RoleError::Eligibility { .. })));
    }

    #[test]
    fn custom_duo_agent_is_free_form() {
        let a = AgentSpec::assistant("fenics_coder", "write code", "local");
        assert!(a.validate().is_ok());
        assert!(a.role().is_none());
    }
}

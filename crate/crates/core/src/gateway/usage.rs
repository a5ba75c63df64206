use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CompletionResult;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentUsage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

impl AgentUsage {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.output_tokens
    }
}

/// Running per-agent token totals for one session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageLedger {
    per_agent: BTreeMap<String, AgentUsage>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, agent: &str, result: &CompletionResult) {
        let u = self.per_agent.entry(agent.to_string()).or_default();
        u.calls += 1;
        u.prompt_tokens += result.prompt_tokens;
        u.output_tokens += result.output_tokens;
    }

    pub fn agent(&self, name: &str) -> AgentUsage {
        self.per_agent.get(name).copied().unwrap_or_default()
    }

    pub fn per_agent(&self) -> &BTreeMap<String, AgentUsage> {
        &self.per_agent
    }

    pub fn totals(&self) -> AgentUsage {
        self.per_agent.values().fold(AgentUsage::default(), |acc, u| AgentUsage {
            calls: acc.calls + u.calls,
            prompt_tokens: acc.prompt_tokens + u.prompt_tokens,
            output_tokens: acc.output_tokens + u.output_tokens,
        })
    }

    pub fn merge(&mut self, other: &UsageLedger) {
        for (name, u) in &other.per_agent {
            let e = self.per_agent.entry(name.clone()).or_default();
            e.calls += u.calls;
            e.prompt_tokens += u.prompt_tokens;
            e.output_tokens += u.output_tokens;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FinishReason;

    fn res(p: u64, o: u64) -> CompletionResult {
        CompletionResult {
            content: String::new(),
            prompt_tokens: p,
            output_tokens: o,
            finish_reason: FinishReason::Stop,
        }
    }

    #[test]
    fn empty_ledger_is_zero() {
        assert_eq!(UsageLedger::new().totals(), AgentUsage::default());
    }

    #[test]
    fn sums_and_per_agent_counts() {
        let mut l = UsageLedger::new();
        l.record("coder", &res(10, 5));
        l.record("coder", &res(7, 3));
        l.record("evaluator", &res(0, 0));
        let t = l.totals();
        assert_eq!((t.prompt_tokens, t.output_tokens), (17, 8));
        assert_eq!(l.agent("coder").calls, 2);
        assert_eq!(l.agent("evaluator").calls, 1);
        assert_eq!(l.agent("planner").calls, 0);
    }
}

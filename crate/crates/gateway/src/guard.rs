//! Deterministic input/output content filter.

use serde::{Deserialize, Serialize};

pub const DEFAULT_BLOCKED_MESSAGE: &str = "This request was blocked by content policy.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardrailConfig {
    pub denylist: Vec<String>,
    pub blocked_message: String,
}

impl Default for GuardrailConfig {
    fn default() -> Self {
        Self { denylist: Vec::new(), blocked_message: DEFAULT_BLOCKED_MESSAGE.to_string() }
    }
}

impl GuardrailConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.denylist.iter().any(|p| p.is_empty()) {
            return Err("guardrail patterns must be nonempty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Blocked(String),
}

impl Verdict {
    pub fn is_blocked(&self) -> bool {
        matches!(self, Verdict::Blocked(_))
    }
}

/// Case-insensitive substring scan; the first pattern in list order wins.
pub fn guard(text: &str, config: &GuardrailConfig) -> Verdict {
    if config.denylist.is_empty() {
        return Verdict::Pass;
    }
    let haystack = text.to_lowercase();
    config
        .denylist
        .iter()
        .find(|p| haystack.contains(&p.to_lowercase()))
        .map_or(Verdict::Pass, |p| Verdict::Blocked(p.clone()))
}

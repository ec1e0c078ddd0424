use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    conversation_hash, GatewayError, Message, Policy, PolicyCandidate, Role, SamplingParams,
    ValueEstimator,
};

/// Deterministic policy driven by a script.
///
/// Lookup order: exact conversation hash in `by_conversation`, then
/// `by_turn[k]` where `k` is the number of assistant turns so far (the last
/// entry repeats). The listed completions are cycled to fill `n`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    #[serde(default)]
    pub by_conversation: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub by_turn: Vec<Vec<String>>,
}

impl ScriptedPolicy {
    pub fn by_turn(turns: Vec<Vec<String>>) -> Self {
        Self { by_conversation: BTreeMap::new(), by_turn: turns }
    }

    pub fn always(text: impl Into<String>) -> Self {
        Self::by_turn(vec![vec![text.into()]])
    }

    pub fn with_conversation(mut self, messages: &[Message], completions: Vec<String>) -> Self {
        self.by_conversation.insert(conversation_hash(messages), completions);
        self
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, String> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }

    fn completions_for(&self, messages: &[Message]) -> Option<&[String]> {
        if let Some(c) = self.by_conversation.get(&conversation_hash(messages)) {
            return Some(c);
        }
        let turn = messages.iter().filter(|m| m.role == Role::Assistant).count();
        let idx = turn.min(self.by_turn.len().checked_sub(1)?);
        Some(&self.by_turn[idx])
    }
}

impl Policy for ScriptedPolicy {
    fn sample(
        &self,
        messages: &[Message],
        params: &SamplingParams,
    ) -> Result<Vec<PolicyCandidate>, GatewayError> {
        let script = self
            .completions_for(messages)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| GatewayError::MalformedResponse {
                service: "policy",
                detail: "script has no entry for this conversation".into(),
            })?;
        Ok((0..params.n.max(1))
            .map(|i| PolicyCandidate::new(script[i % script.len()].clone()))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroValue;

impl ValueEstimator for ZeroValue {
    fn score(&self, _messages: &[Message]) -> Result<f64, GatewayError> {
        Ok(0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstValue(pub f64);

impl ValueEstimator for ConstValue {
    fn score(&self, _messages: &[Message]) -> Result<f64, GatewayError> {
        Ok(self.0)
    }
}

//! Contracts for the two remote model services: a sampling policy that
//! proposes thought/action turns and a value estimator that scores partial
//! conversations. HTTP clients, scripted mocks and token budgeting live in
//! the submodules.

pub(crate) mod http;
mod mock;
mod tokens;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpPolicy, HttpValueEstimator, RetryPolicy};
pub use mock::{ConstValue, ScriptedPolicy, ZeroValue};
pub use tokens::{
    conversation_tokens, estimate_tokens, truncate_to_budget, HeuristicTokens, TokenEstimator,
    Truncated,
};

/// Default input budget for policy prompts, in estimated tokens.
pub const POLICY_INPUT_BUDGET: usize = 100_000;
/// Default input budget for value-estimator prompts, in estimated tokens.
pub const VALUE_INPUT_BUDGET: usize = 8_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

/// Content digest of a conversation, used to key scripted mocks.
pub fn conversation_hash(messages: &[Message]) -> String {
    crate::util::stable_hash_hex(
        messages
            .iter()
            .flat_map(|m| [m.role.to_string().into_bytes(), m.content.clone().into_bytes()]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub n: usize,
    /// Per-request sampling seed. The search derives it from the tree seed
    /// and the node being expanded so scripted backends stay reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Ask the backend for token log-probabilities.
    #[serde(default)]
    pub logprobs: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            max_output_tokens: 8192,
            n: 3,
            seed: None,
            logprobs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCandidate {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_logprob: Option<f64>,
}

impl PolicyCandidate {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into(), mean_logprob: None }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("{service} service unavailable after {attempts} attempt(s): {last_error}")]
    ServiceUnavailable {
        service: &'static str,
        attempts: u32,
        last_error: String,
    },
    #[error("malformed response from {service} service: {detail}")]
    MalformedResponse { service: &'static str, detail: String },
    #[error("{service} service rejected request with status {status}: {body}")]
    Rejected {
        service: &'static str,
        status: u16,
        body: String,
    },
    #[error("unsupported backend url {0:?}")]
    UnsupportedUrl(String),
}

/// A sampling policy. One call may return fewer than `params.n` candidates;
/// [`generate_candidates`] tops up with further calls.
pub trait Policy: Send + Sync {
    fn sample(
        &self,
        messages: &[Message],
        params: &SamplingParams,
    ) -> Result<Vec<PolicyCandidate>, GatewayError>;
}

impl<F> Policy for F
where
    F: Fn(&[Message], &SamplingParams) -> Result<Vec<PolicyCandidate>, GatewayError> + Send + Sync,
{
    fn sample(
        &self,
        messages: &[Message],
        params: &SamplingParams,
    ) -> Result<Vec<PolicyCandidate>, GatewayError> {
        self(messages, params)
    }
}

/// A value estimator returning a raw score for a partial conversation.
/// Callers go through [`estimate_value`], which truncates and clamps.
pub trait ValueEstimator: Send + Sync {
    fn score(&self, messages: &[Message]) -> Result<f64, GatewayError>;
}

impl<F> ValueEstimator for F
where
    F: Fn(&[Message]) -> Result<f64, GatewayError> + Send + Sync,
{
    fn score(&self, messages: &[Message]) -> Result<f64, GatewayError> {
        self(messages)
    }
}

/// Returns exactly `params.n` candidates, calling the policy repeatedly when
/// a single call yields fewer. Each top-up call asks only for the remainder
/// and bumps the seed so calls sample independently.
pub fn generate_candidates(
    policy: &dyn Policy,
    messages: &[Message],
    params: &SamplingParams,
) -> Result<Vec<PolicyCandidate>, GatewayError> {
    let want = params.n.max(1);
    let mut out = Vec::with_capacity(want);
    let mut call = 0u64;
    // every call must make progress; bound the loop in case it doesn't
    let max_calls = want as u64 * 2 + 2;
    while out.len() < want {
        if call >= max_calls {
            return Err(GatewayError::MalformedResponse {
                service: "policy",
                detail: format!("only {} of {} candidates after {call} calls", out.len(), want),
            });
        }
        let mut p = params.clone();
        p.n = want - out.len();
        p.seed = params.seed.map(|s| s.wrapping_add(call));
        let batch = policy.sample(messages, &p)?;
        out.extend(batch);
        call += 1;
    }
    out.truncate(want);
    Ok(out)
}

/// Scores a conversation: truncates it to `budget` tokens (keeping the task
/// head and the most recent turns) and clamps the result into `[-1, 1]`.
/// A NaN score is treated as a malformed response.
pub fn estimate_value(
    estimator: &dyn ValueEstimator,
    messages: &[Message],
    budget: usize,
    tokens: &dyn TokenEstimator,
) -> Result<f64, GatewayError> {
    let truncated = truncate_to_budget(messages, budget, tokens);
    let raw = estimator.score(&truncated.messages)?;
    if raw.is_nan() {
        return Err(GatewayError::MalformedResponse {
            service: "value",
            detail: "score is NaN".into(),
        });
    }
    Ok(raw.clamp(-1.0, 1.0))
}

/// Selects a policy backend from a URL. `mock:script=<path>` loads a
/// [`ScriptedPolicy`]; `mock:answer=<text>` always answers with `<text>`;
/// http(s) URLs use [`HttpPolicy`].
pub fn policy_from_url(
    url: &str,
    model: &str,
    api_key: Option<String>,
) -> Result<Box<dyn Policy>, GatewayError> {
    if let Some(rest) = url.strip_prefix("mock:") {
        if let Some(path) = rest.strip_prefix("script=") {
            let policy = ScriptedPolicy::from_file(path)
                .map_err(|e| GatewayError::UnsupportedUrl(format!("{url}: {e}")))?;
            return Ok(Box::new(policy));
        }
        if let Some(answer) = rest.strip_prefix("answer=") {
            return Ok(Box::new(ScriptedPolicy::always(format!(
                "Thought: I know the answer.\nFormatted answer: {answer}"
            ))));
        }
        return Err(GatewayError::UnsupportedUrl(url.to_string()));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        return Ok(Box::new(HttpPolicy::new(url, model, api_key)));
    }
    Err(GatewayError::UnsupportedUrl(url.to_string()))
}

/// Selects a value backend: `mock:zero`, `mock:const=<v>`, or an http(s) URL.
pub fn value_from_url(
    url: &str,
    api_key: Option<String>,
) -> Result<Box<dyn ValueEstimator>, GatewayError> {
    if let Some(rest) = url.strip_prefix("mock:") {
        if rest.is_empty() || rest == "zero" {
            return Ok(Box::new(ZeroValue));
        }
        if let Some(v) = rest.strip_prefix("const=") {
            let v: f64 = v
                .parse()
                .map_err(|_| GatewayError::UnsupportedUrl(url.to_string()))?;
            return Ok(Box::new(ConstValue(v)));
        }
        return Err(GatewayError::UnsupportedUrl(url.to_string()));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        return Ok(Box::new(HttpValueEstimator::new(url, api_key)));
    }
    Err(GatewayError::UnsupportedUrl(url.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn tops_up_to_n_with_repeated_calls() {
        let calls = AtomicUsize::new(0);
        let one_per_call = |_: &[Message], p: &SamplingParams| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(vec![PolicyCandidate::new(format!("seed {:?}", p.seed))])
        };
        let params = SamplingParams { n: 3, seed: Some(10), ..Default::default() };
        let out = generate_candidates(&one_per_call, &[Message::user("q")], &params).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(out[2].text, "seed Some(12)");
    }

    #[test]
    fn empty_backend_is_malformed() {
        let empty = |_: &[Message], _: &SamplingParams| Ok(vec![]);
        let err = generate_candidates(&empty, &[Message::user("q")], &SamplingParams::default())
            .unwrap_err();
        assert!(matches!(err, GatewayError::MalformedResponse { .. }));
    }

    #[test]
    fn value_is_clamped() {
        let hot = |_: &[Message]| Ok(1.7);
        let cold = |_: &[Message]| Ok(-3.0);
        let msgs = [Message::user("q")];
        assert_eq!(estimate_value(&hot, &msgs, 100, &HeuristicTokens).unwrap(), 1.0);
        assert_eq!(estimate_value(&cold, &msgs, 100, &HeuristicTokens).unwrap(), -1.0);
        assert_eq!(estimate_value(&ZeroValue, &msgs, 100, &HeuristicTokens).unwrap(), 0.0);
        let nan = |_: &[Message]| Ok(f64::NAN);
        assert!(estimate_value(&nan, &msgs, 100, &HeuristicTokens).is_err());
    }

    #[test]
    fn value_input_is_truncated_before_dispatch() {
        let seen = std::sync::Mutex::new(0usize);
        let spy = |m: &[Message]| {
            *seen.lock().unwrap() = m.len();
            Ok(0.0)
        };
        let mut msgs = vec![Message::user("task")];
        for i in 0..10 {
            msgs.push(Message::assistant(format!("{i}").repeat(40)));
        }
        estimate_value(&spy, &msgs, 31, &HeuristicTokens).unwrap();
        // head (1 token) + three 10-token turns
        assert_eq!(*seen.lock().unwrap(), 4);
    }

    #[test]
    fn url_dispatch() {
        assert!(value_from_url("mock:zero", None).is_ok());
        assert!(value_from_url("mock:const=0.5", None).is_ok());
        assert!(value_from_url("ftp://x", None).is_err());
        assert!(policy_from_url("mock:answer=@x[1]", "m", None).is_ok());
        assert!(policy_from_url("mock:nope", "m", None).is_err());
    }

    proptest::proptest! {
        #[test]
        fn clamped_for_any_raw_score(raw in proptest::num::f64::ANY) {
            let est = move |_: &[Message]| Ok(raw);
            if let Ok(v) = estimate_value(&est, &[Message::user("q")], 10, &HeuristicTokens) {
                proptest::prop_assert!((-1.0..=1.0).contains(&v));
            }
        }
    }
}

use std::time::Duration;

use serde::Serialize;
use serde_json::{json, Value};

use super::{GatewayError, Message, Policy, PolicyCandidate, SamplingParams, ValueEstimator};
use crate::util::Semaphore;

/// Bounded retries with exponential backoff. Retries transport failures,
/// HTTP 429 and 5xx; other 4xx statuses fail immediately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff: Duration::from_secs(1), multiplier: 2.0 }
    }
}

impl RetryPolicy {
    pub fn fast() -> Self {
        Self { attempts: 3, initial_backoff: Duration::from_millis(1), multiplier: 2.0 }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.initial_backoff.mul_f64(self.multiplier.powi(attempt as i32))
    }
}

pub(crate) struct JsonEndpoint {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    in_flight: Semaphore,
    service: &'static str,
}

impl JsonEndpoint {
    pub(crate) fn new(service: &'static str, url: String, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(900)))
            .build()
            .into();
        Self {
            agent,
            url,
            api_key,
            retry: RetryPolicy::default(),
            in_flight: Semaphore::new(40),
            service,
        }
    }

    pub(crate) fn set_retry(&mut self, retry: RetryPolicy) {
        self.retry = retry;
    }

    pub(crate) fn set_max_in_flight(&mut self, n: usize) {
        self.in_flight = Semaphore::new(n);
    }

    pub(crate) fn url(&self) -> &str {
        &self.url
    }

    pub(crate) fn post<B: Serialize>(&self, body: &B) -> Result<Value, GatewayError> {
        let _permit = self.in_flight.acquire();
        let attempts = self.retry.attempts.max(1);
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            let mut req = self.agent.post(&self.url);
            if let Some(key) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text).map_err(|e| {
                            GatewayError::MalformedResponse {
                                service: self.service,
                                detail: format!("invalid json: {e}"),
                            }
                        });
                    }
                    if status == 429 || status >= 500 {
                        tracing::warn!(service = self.service, status, attempt, "retrying request");
                        last_error = format!("HTTP {status}: {text}");
                        continue;
                    }
                    return Err(GatewayError::Rejected { service: self.service, status, body: text });
                }
                Err(e) => {
                    tracing::warn!(service = self.service, error = %e, attempt, "retrying request");
                    last_error = e.to_string();
                }
            }
        }
        Err(GatewayError::ServiceUnavailable { service: self.service, attempts, last_error })
    }
}

fn endpoint_url(base: &str, suffix: &str, default_prefix: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(suffix) {
        base.to_string()
    } else if default_prefix.is_empty() || base.ends_with(default_prefix) {
        format!("{base}{suffix}")
    } else {
        format!("{base}{default_prefix}{suffix}")
    }
}

/// Client for a chat-completions-compatible sampling endpoint.
pub struct HttpPolicy {
    endpoint: JsonEndpoint,
    model: String,
}

impl HttpPolicy {
    pub fn new(url: &str, model: &str, api_key: Option<String>) -> Self {
        let url = endpoint_url(url, "/chat/completions", "/v1");
        Self { endpoint: JsonEndpoint::new("policy", url, api_key), model: model.to_string() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.endpoint.set_retry(retry);
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.endpoint.set_max_in_flight(n);
        self
    }

    pub fn url(&self) -> &str {
        self.endpoint.url()
    }
}

fn mean_logprob(choice: &Value) -> Option<f64> {
    let tokens = choice.get("logprobs")?.get("content")?.as_array()?;
    let lps: Vec<f64> = tokens.iter().filter_map(|t| t.get("logprob")?.as_f64()).collect();
    if lps.is_empty() {
        return None;
    }
    Some(lps.iter().sum::<f64>() / lps.len() as f64)
}

impl Policy for HttpPolicy {
    fn sample(
        &self,
        messages: &[Message],
        params: &SamplingParams,
    ) -> Result<Vec<PolicyCandidate>, GatewayError> {
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "n": params.n,
            "max_tokens": params.max_output_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        if params.logprobs {
            body["logprobs"] = json!(true);
        }
        let resp = self.endpoint.post(&body)?;
        let malformed = |detail: &str| GatewayError::MalformedResponse {
            service: "policy",
            detail: detail.to_string(),
        };
        let choices = resp
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing choices array"))?;
        choices
            .iter()
            .map(|c| {
                let text = c
                    .get("message")
                    .and_then(|m| m.get("content"))
                    .and_then(Value::as_str)
                    .ok_or_else(|| malformed("choice without message.content"))?;
                Ok(PolicyCandidate { text: text.to_string(), mean_logprob: mean_logprob(c) })
            })
            .collect()
    }
}

/// Client for the `POST /score {messages} -> {"value": r}` contract.
pub struct HttpValueEstimator {
    endpoint: JsonEndpoint,
}

impl HttpValueEstimator {
    pub fn new(url: &str, api_key: Option<String>) -> Self {
        let url = endpoint_url(url, "/score", "");
        Self { endpoint: JsonEndpoint::new("value", url, api_key) }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.endpoint.set_retry(retry);
        self
    }

    pub fn url(&self) -> &str {
        self.endpoint.url()
    }
}

impl ValueEstimator for HttpValueEstimator {
    fn score(&self, messages: &[Message]) -> Result<f64, GatewayError> {
        let resp = self.endpoint.post(&json!({ "messages": messages }))?;
        resp.get("value").and_then(Value::as_f64).ok_or_else(|| {
            GatewayError::MalformedResponse {
                service: "value",
                detail: format!("expected {{\"value\": number}}, got {resp}"),
            }
        })
    }
}

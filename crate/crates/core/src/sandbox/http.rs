use serde::Deserialize;
use serde_json::json;

use super::{ExecutionResult, Executor, SandboxError, SessionSpec};
use crate::gateway::{GatewayError, RetryPolicy};
use crate::gateway::http::JsonEndpoint;

/// Client for a remote `POST /run_code {cells, timeout} -> {results}` service.
pub struct HttpExecutor {
    endpoint: JsonEndpoint,
}

#[derive(Deserialize)]
struct RunCodeResponse {
    results: Vec<ExecutionResult>,
}

impl HttpExecutor {
    pub fn new(url: &str) -> Self {
        let base = url.trim_end_matches('/');
        let url = if base.ends_with("/run_code") { base.to_string() } else { format!("{base}/run_code") };
        Self { endpoint: JsonEndpoint::new("sandbox", url, None) }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.endpoint.set_retry(retry);
        self
    }
}

impl Executor for HttpExecutor {
    fn run_cells(&self, spec: &SessionSpec, cells: &[String]) -> Result<Vec<ExecutionResult>, SandboxError> {
        let mut body = json!({ "cells": cells, "timeout": spec.timeout_secs });
        if let Some(dir) = &spec.data_dir {
            body["data_dir"] = json!(dir);
        }
        let value = self.endpoint.post(&body).map_err(|e: GatewayError| SandboxError::Unavailable(e.to_string()))?;
        let resp: RunCodeResponse = serde_json::from_value(value)
            .map_err(|e| SandboxError::Unavailable(format!("malformed run_code response: {e}")))?;
        Ok(resp.results)
    }
}

//! Code-cell execution.
//!
//! Every expansion replays the ancestor cells of the parent node in a fresh
//! session and then runs the new cell, so any node can be expanded in any
//! order without sharing live interpreter state between branches.

mod http;
mod local;
mod mock;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search::{NodeId, SearchError, SearchTree};
use crate::util::Semaphore;

pub use http::HttpExecutor;
pub use local::LocalPythonExecutor;
pub use mock::MockExecutor;

pub const TRUNCATION_MARKER: &str = "…[truncated]";
pub const DEFAULT_MAX_CONCURRENT_JOBS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub timeout_secs: f64,
    pub output_char_limit: usize,
}

impl Default for SessionSpec {
    fn default() -> Self {
        Self { data_dir: None, timeout_secs: 180.0, output_char_limit: 10_000 }
    }
}

impl SessionSpec {
    pub fn timeout(&self) -> std::time::Duration {
        std::time::Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_name: Option<String>,
    #[serde(default)]
    pub duration_ms: u64,
    #[serde(default)]
    pub truncated: bool,
}

impl ExecutionResult {
    pub fn ok(stdout: impl Into<String>) -> Self {
        Self {
            status: ExecStatus::Ok,
            stdout: stdout.into(),
            stderr: String::new(),
            error_name: None,
            duration_ms: 0,
            truncated: false,
        }
    }

    pub fn error(name: impl Into<String>, stderr: impl Into<String>) -> Self {
        Self {
            status: ExecStatus::Error,
            stdout: String::new(),
            stderr: stderr.into(),
            error_name: Some(name.into()),
            duration_ms: 0,
            truncated: false,
        }
    }

    pub fn timeout(limit_secs: f64) -> Self {
        Self {
            status: ExecStatus::Timeout,
            stdout: String::new(),
            stderr: format!("TimeoutError: cell exceeded {limit_secs} s"),
            error_name: Some("TimeoutError".into()),
            duration_ms: (limit_secs * 1000.0).ceil() as u64,
            truncated: false,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    /// Text shown to the model as the observation: stdout, then stderr.
    pub fn observation(&self) -> String {
        match (self.stdout.is_empty(), self.stderr.is_empty()) {
            (_, true) => self.stdout.clone(),
            (true, false) => self.stderr.clone(),
            (false, false) => {
                let sep = if self.stdout.ends_with('\n') { "" } else { "\n" };
                format!("{}{sep}{}", self.stdout, self.stderr)
            }
        }
    }

    fn limit_output(&mut self, limit: usize) {
        for s in [&mut self.stdout, &mut self.stderr] {
            if s.chars().count() > limit {
                let cut = s.char_indices().nth(limit).map(|(i, _)| i).unwrap_or(s.len());
                s.truncate(cut);
                s.push_str(TRUNCATION_MARKER);
                self.truncated = true;
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SandboxError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
    #[error("no cells to execute")]
    NoCells,
}

/// An execution backend. `run_cells` opens a fresh session, runs the cells
/// in order and may stop early on the first failure.
pub trait Executor: Send + Sync {
    fn run_cells(&self, spec: &SessionSpec, cells: &[String]) -> Result<Vec<ExecutionResult>, SandboxError>;
}

impl<F> Executor for F
where
    F: Fn(&SessionSpec, &[String]) -> Result<Vec<ExecutionResult>, SandboxError> + Send + Sync,
{
    fn run_cells(&self, spec: &SessionSpec, cells: &[String]) -> Result<Vec<ExecutionResult>, SandboxError> {
        self(spec, cells)
    }
}

impl<E: Executor + ?Sized> Executor for Arc<E> {
    fn run_cells(&self, spec: &SessionSpec, cells: &[String]) -> Result<Vec<ExecutionResult>, SandboxError> {
        (**self).run_cells(spec, cells)
    }
}

/// Runs `cells` in one fresh session. Results stop at (and include) the
/// first non-ok cell; outputs over the session's output limit are truncated.
pub fn execute_cells(
    executor: &dyn Executor,
    spec: &SessionSpec,
    cells: &[String],
) -> Result<Vec<ExecutionResult>, SandboxError> {
    if cells.is_empty() {
        return Err(SandboxError::NoCells);
    }
    let mut results = executor.run_cells(spec, cells)?;
    if let Some(first_bad) = results.iter().position(|r| !r.is_ok()) {
        results.truncate(first_bad + 1);
    }
    results.truncate(cells.len());
    if results.is_empty() {
        return Err(SandboxError::Unavailable("backend returned no results".into()));
    }
    for r in &mut results {
        r.limit_output(spec.output_char_limit);
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeExecution {
    pub result: ExecutionResult,
    /// An ancestor cell that succeeded originally failed on replay.
    pub replay_diverged: bool,
}

/// Ancestor cells replayed before a new cell under `parent_id`: the code of
/// every executed node on the root-to-parent path whose cell succeeded.
pub fn replay_cells(tree: &SearchTree, parent_id: NodeId) -> Result<Vec<String>, SearchError> {
    let mut cells = Vec::new();
    for id in tree.path_to(parent_id)? {
        let node = tree.node(id)?;
        if let (Some(code), Some(ExecStatus::Ok)) = (&node.action_code, node.exec_status) {
            cells.push(code.clone());
        }
    }
    Ok(cells)
}

/// Replays the parent's path in a fresh session, runs `new_code`, and
/// returns only the new cell's result.
pub fn execute_node_path(
    executor: &dyn Executor,
    spec: &SessionSpec,
    ancestors: &[String],
    new_code: &str,
) -> Result<NodeExecution, SandboxError> {
    let mut cells = ancestors.to_vec();
    cells.push(new_code.to_string());
    let mut results = execute_cells(executor, spec, &cells)?;
    if results.len() < cells.len() {
        let failed = results.pop().expect("non-empty results");
        let idx = results.len();
        let mut result = ExecutionResult::error(
            "ReplayDiverged",
            format!(
                "ReplayDiverged: ancestor cell {idx} failed on replay ({:?}): {}",
                failed.status,
                failed.observation()
            ),
        );
        result.duration_ms = failed.duration_ms;
        return Ok(NodeExecution { result, replay_diverged: true });
    }
    let result = results.pop().expect("non-empty results");
    Ok(NodeExecution { result, replay_diverged: false })
}

/// Shares one backend among many trees with a bound on in-flight sessions.
pub struct BoundedExecutor {
    inner: Arc<dyn Executor>,
    permits: Semaphore,
}

impl BoundedExecutor {
    pub fn new(inner: Arc<dyn Executor>, max_concurrent_jobs: usize) -> Self {
        Self { inner, permits: Semaphore::new(max_concurrent_jobs) }
    }

    pub fn peak_concurrency(&self) -> usize {
        self.permits.peak()
    }

    pub fn max_concurrent_jobs(&self) -> usize {
        self.permits.permits()
    }
}

impl Executor for BoundedExecutor {
    fn run_cells(&self, spec: &SessionSpec, cells: &[String]) -> Result<Vec<ExecutionResult>, SandboxError> {
        let _permit = self.permits.acquire();
        self.inner.run_cells(spec, cells)
    }
}

/// Selects an executor: `mock:` (all cells ok, empty output),
/// `mock:script=<path>`, `local` / `local:<python>`, or an http(s) URL.
pub fn executor_from_url(url: &str) -> Result<Arc<dyn Executor>, SandboxError> {
    if let Some(rest) = url.strip_prefix("mock:") {
        if rest.is_empty() {
            return Ok(Arc::new(MockExecutor::default()));
        }
        if let Some(path) = rest.strip_prefix("script=") {
            return MockExecutor::from_file(path)
                .map(|m| Arc::new(m) as Arc<dyn Executor>)
                .map_err(SandboxError::Unavailable);
        }
    }
    if url == "local" {
        return Ok(Arc::new(LocalPythonExecutor::default()));
    }
    if let Some(python) = url.strip_prefix("local:") {
        return Ok(Arc::new(LocalPythonExecutor::new(python)));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        return Ok(Arc::new(HttpExecutor::new(url)));
    }
    Err(SandboxError::Unavailable(format!("unsupported executor url {url:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn stops_at_first_failure_and_truncates() {
        let exec = |_: &SessionSpec, cells: &[String]| {
            Ok(cells
                .iter()
                .map(|c| if c == "boom" { ExecutionResult::error("E", "bad") } else { ExecutionResult::ok("x".repeat(30)) })
                .collect())
        };
        let spec = SessionSpec { output_char_limit: 10, ..Default::default() };
        let cells: Vec<String> = ["a", "boom", "c"].iter().map(|s| s.to_string()).collect();
        let r = execute_cells(&exec, &spec, &cells).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r[0].truncated);
        assert_eq!(r[0].stdout, format!("{}{TRUNCATION_MARKER}", "x".repeat(10)));
        assert_eq!(r[1].status, ExecStatus::Error);
        assert_eq!(execute_cells(&exec, &spec, &[]), Err(SandboxError::NoCells));
    }

    #[test]
    fn node_path_returns_final_cell_only() {
        let mock = MockExecutor::default()
            .with_sequence(&["x=2", "print(x*2)"], ExecutionResult::ok("4\n"));
        let out = execute_node_path(&mock, &SessionSpec::default(), &["x=2".into()], "print(x*2)").unwrap();
        assert_eq!(out.result, ExecutionResult::ok("4\n"));
        assert!(!out.replay_diverged);
    }

    #[test]
    fn replay_divergence_is_flagged() {
        // the ancestor cell succeeds on its first run and fails afterwards
        let runs = AtomicUsize::new(0);
        let flaky = |_: &SessionSpec, cells: &[String]| {
            let n = runs.fetch_add(1, Ordering::SeqCst);
            let first = if n == 0 { ExecutionResult::ok("") } else { ExecutionResult::error("OSError", "flaky") };
            let mut out = vec![first];
            out.extend(cells[1..].iter().map(|_| ExecutionResult::ok("")));
            Ok(out)
        };
        let spec = SessionSpec::default();
        let first = execute_node_path(&flaky, &spec, &[], "load()").unwrap();
        assert!(first.result.is_ok());
        let second = execute_node_path(&flaky, &spec, &["load()".into()], "print(1)").unwrap();
        assert!(second.replay_diverged);
        assert_eq!(second.result.status, ExecStatus::Error);
        assert_eq!(second.result.error_name.as_deref(), Some("ReplayDiverged"));
    }

    #[test]
    fn observation_text() {
        let mut r = ExecutionResult::ok("a\n");
        assert_eq!(r.observation(), "a\n");
        r.stderr = "warn".into();
        assert_eq!(r.observation(), "a\nwarn");
        assert_eq!(ExecutionResult::error("E", "tb").observation(), "tb");
    }

    #[test]
    fn bounded_pool_never_exceeds_permits() {
        let active = Arc::new(AtomicUsize::new(0));
        let seen_max = Arc::new(AtomicUsize::new(0));
        let (a, m) = (active.clone(), seen_max.clone());
        let slow = move |_: &SessionSpec, cells: &[String]| {
            let now = a.fetch_add(1, Ordering::SeqCst) + 1;
            m.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(3));
            a.fetch_sub(1, Ordering::SeqCst);
            Ok(cells.iter().map(|_| ExecutionResult::ok("")).collect())
        };
        let pool = BoundedExecutor::new(Arc::new(slow), 4);
        std::thread::scope(|s| {
            for _ in 0..32 {
                s.spawn(|| pool.run_cells(&SessionSpec::default(), &["x".into()]).unwrap());
            }
        });
        assert!(seen_max.load(Ordering::SeqCst) <= 4);
        assert!(pool.peak_concurrency() <= 4);
    }

    #[test]
    fn url_dispatch() {
        assert!(executor_from_url("mock:").is_ok());
        assert!(executor_from_url("local").is_ok());
        assert!(executor_from_url("http://localhost:1").is_ok());
        assert!(executor_from_url("carrier-pigeon").is_err());
    }
}

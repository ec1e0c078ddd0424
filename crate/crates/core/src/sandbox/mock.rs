use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExecutionResult, Executor, SandboxError, SessionSpec};
use crate::util::stable_hash_hex;

/// Deterministic lookup executor.
///
/// Each cell's result is looked up by the hash of the cell sequence up to and
/// including it, then by the cell's exact text, then falls back to `default`
/// (`ok ""` unless configured). Timeouts are returned without waiting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockExecutor {
    #[serde(default)]
    pub by_sequence: BTreeMap<String, ExecutionResult>,
    #[serde(default)]
    pub by_cell: BTreeMap<String, ExecutionResult>,
    #[serde(default = "default_result")]
    pub default: ExecutionResult,
}

fn default_result() -> ExecutionResult {
    ExecutionResult::ok("")
}

impl Default for MockExecutor {
    fn default() -> Self {
        Self { by_sequence: BTreeMap::new(), by_cell: BTreeMap::new(), default: default_result() }
    }
}

pub fn sequence_key<S: AsRef<str>>(cells: &[S]) -> String {
    stable_hash_hex(cells.iter().map(|c| c.as_ref().as_bytes()))
}

impl MockExecutor {
    pub fn with_default(mut self, result: ExecutionResult) -> Self {
        self.default = result;
        self
    }

    pub fn with_sequence<S: AsRef<str>>(mut self, cells: &[S], result: ExecutionResult) -> Self {
        self.by_sequence.insert(sequence_key(cells), result);
        self
    }

    pub fn with_cell(mut self, cell: impl Into<String>, result: ExecutionResult) -> Self {
        self.by_cell.insert(cell.into(), result);
        self
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, String> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }

    fn lookup(&self, prefix: &[String]) -> ExecutionResult {
        if let Some(r) = self.by_sequence.get(&sequence_key(prefix)) {
            return r.clone();
        }
        let last = prefix.last().map(String::as_str).unwrap_or("");
        self.by_cell.get(last).cloned().unwrap_or_else(|| self.default.clone())
    }
}

impl Executor for MockExecutor {
    fn run_cells(&self, _spec: &SessionSpec, cells: &[String]) -> Result<Vec<ExecutionResult>, SandboxError> {
        let mut out = Vec::with_capacity(cells.len());
        for i in 0..cells.len() {
            let r = self.lookup(&cells[..=i]);
            let stop = !r.is_ok();
            out.push(r);
            if stop {
                break;
            }
        }
        Ok(out)
    }
}

//! Batch runs: task loading, a worker pool over trees, per-task snapshots
//! and a manifest that records progress so interrupted runs can resume.
//!
//! Layout of an output directory:
//!
//! ```text
//! out/
//!   manifest.json
//!   trees/<task_id>.json
//! ```

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{Grader, Tolerance};
use crate::gateway::{Policy, TokenEstimator, ValueEstimator};
use crate::persist::{self, PersistError};
use crate::protocol::{render_task_prompt, PromptTemplate, TaskSpec};
use crate::sandbox::{Executor, SessionSpec};
use crate::search::{continue_search, final_labels, SearchConfig, SearchDeps, SearchError, SearchTree};
use crate::util::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TREES_DIR: &str = "trees";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("{path}:{line}: {message}")]
    TaskParse { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Search(#[from] SearchError),
}

/// Reads a JSONL task file. Blank lines are skipped; every other line must be
/// a task object with a non-empty, unique `task_id` and, when present, a
/// label holding at least one `@name[value]` pair.
pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskSpec>, OrchestratorError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut tasks = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |message: String| OrchestratorError::TaskParse { path: display.clone(), line: i + 1, message };
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskSpec = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if task.task_id.trim().is_empty() {
            return Err(err("empty task_id".into()));
        }
        if !ids.insert(task.task_id.clone()) {
            return Err(err(format!("duplicate task_id {:?}", task.task_id)));
        }
        if task.expected_labels().is_some_and(|l| l.is_empty()) {
            return Err(err(format!("label {:?} has no @name[value] pair", task.label.as_deref().unwrap_or(""))));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task: TaskSpec,
    pub status: TaskStatus,
    pub seed: u64,
    /// Relative to the run directory.
    pub snapshot: String,
    #[serde(default)]
    pub started_at_ms: Option<u64>,
    #[serde(default)]
    pub finished_at_ms: Option<u64>,
    #[serde(default)]
    pub iterations_done: u32,
    #[serde(default)]
    pub answer_nodes: usize,
    #[serde(default)]
    pub final_answer: Option<String>,
    #[serde(default)]
    pub correct: Option<bool>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub policy: String,
    pub value: Option<String>,
    pub executor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at_ms: u64,
    pub master_seed: u64,
    pub parallel_trees: usize,
    pub config: SearchConfig,
    pub tolerance: Tolerance,
    pub session: SessionSpec,
    pub endpoints: Endpoints,
    pub tasks: Vec<TaskEntry>,
}

impl RunManifest {
    pub fn count(&self, status: TaskStatus) -> usize {
        self.tasks.iter().filter(|t| t.status == status).count()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Manifest(e.to_string()))
    }

    fn save(&self, dir: &Path) -> Result<(), OrchestratorError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| OrchestratorError::Manifest(e.to_string()))?;
        text.push('\n');
        persist::write_atomic(dir.join(MANIFEST_FILE), &text)?;
        Ok(())
    }
}

/// Shared service handles; every worker uses the same instances so their
/// in-flight limits are global to the run.
pub struct Services<'a> {
    pub policy: &'a dyn Policy,
    pub executor: &'a dyn Executor,
    pub value: Option<&'a dyn ValueEstimator>,
    pub tokens: &'a dyn TokenEstimator,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub run_id: String,
    pub master_seed: u64,
    pub parallel_trees: usize,
    pub tolerance: Tolerance,
    pub session: SessionSpec,
    pub endpoints: Endpoints,
    pub template: PromptTemplate,
    /// Also write the tree every this many iterations while it runs.
    pub checkpoint_every: Option<u32>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            run_id: format!("run-{}", now_ms()),
            master_seed: 0,
            parallel_trees: 1,
            tolerance: Tolerance::default(),
            session: SessionSpec::default(),
            endpoints: Endpoints::default(),
            template: PromptTemplate::default(),
            checkpoint_every: None,
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// File-system-safe snapshot name for a task id.
pub fn snapshot_name(task_id: &str) -> String {
    let safe: String = task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if safe == task_id {
        format!("{TREES_DIR}/{safe}.json")
    } else {
        // keep distinct ids distinct after sanitizing
        format!("{TREES_DIR}/{safe}-{:08x}.json", crate::util::stable_hash64([task_id.as_bytes()]) as u32)
    }
}

/// Starts a fresh run: writes a manifest with every task pending, then runs
/// them on `parallel_trees` workers.
pub fn run_batch(
    tasks: &[TaskSpec],
    config: &SearchConfig,
    opts: &RunOptions,
    services: &Services<'_>,
) -> Result<RunManifest, OrchestratorError> {
    config.validate()?;
    std::fs::create_dir_all(opts.out_dir.join(TREES_DIR))?;
    let manifest = RunManifest {
        run_id: opts.run_id.clone(),
        created_at_ms: now_ms(),
        master_seed: opts.master_seed,
        parallel_trees: opts.parallel_trees.max(1),
        config: config.clone(),
        tolerance: opts.tolerance,
        session: opts.session.clone(),
        endpoints: opts.endpoints.clone(),
        tasks: tasks
            .iter()
            .map(|t| TaskEntry {
                task: t.clone(),
                status: TaskStatus::Pending,
                seed: derive_seed(opts.master_seed, &t.task_id),
                snapshot: snapshot_name(&t.task_id),
                started_at_ms: None,
                finished_at_ms: None,
                iterations_done: 0,
                answer_nodes: 0,
                final_answer: None,
                correct: None,
                error: None,
            })
            .collect(),
    };
    manifest.save(&opts.out_dir)?;
    execute(manifest, &opts.out_dir, &opts.template, opts.checkpoint_every, services)
}

/// Re-runs every task that is not done. A task whose snapshot exists
/// continues from it; a corrupt snapshot marks the task failed.
pub fn resume_run(
    out_dir: impl AsRef<Path>,
    template: &PromptTemplate,
    checkpoint_every: Option<u32>,
    services: &Services<'_>,
) -> Result<RunManifest, OrchestratorError> {
    let dir = out_dir.as_ref();
    let mut manifest = RunManifest::load(dir)?;
    for t in &mut manifest.tasks {
        if t.status != TaskStatus::Done {
            t.status = TaskStatus::Pending;
        }
    }
    manifest.save(dir)?;
    execute(manifest, dir, template, checkpoint_every, services)
}

struct TaskOutcome {
    tree: Option<SearchTree>,
    error: Option<String>,
}

fn execute(
    manifest: RunManifest,
    dir: &Path,
    template: &PromptTemplate,
    checkpoint_every: Option<u32>,
    services: &Services<'_>,
) -> Result<RunManifest, OrchestratorError> {
    let pending: Vec<usize> = (0..manifest.tasks.len())
        .filter(|&i| manifest.tasks[i].status == TaskStatus::Pending)
        .collect();
    let workers = manifest.parallel_trees.max(1).min(pending.len().max(1));
    let config = manifest.config.clone();
    let tolerance = manifest.tolerance;
    let session = manifest.session.clone();
    let shared = Mutex::new(manifest);
    let next = AtomicUsize::new(0);
    let fatal: Mutex<Option<OrchestratorError>> = Mutex::new(None);

    let update = |i: usize, f: &dyn Fn(&mut TaskEntry)| -> Result<(), OrchestratorError> {
        let mut m = shared.lock().expect("manifest lock");
        f(&mut m.tasks[i]);
        m.save(dir)
    };

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if fatal.lock().expect("fatal lock").is_some() {
                    return;
                }
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(slot) else { return };
                let entry = shared.lock().expect("manifest lock").tasks[i].clone();
                let started = now_ms();
                if let Err(e) = update(i, &|t| {
                    t.status = TaskStatus::Running;
                    t.started_at_ms = Some(started);
                    t.error = None;
                }) {
                    *fatal.lock().expect("fatal lock") = Some(e);
                    return;
                }
                let snapshot_path = dir.join(&entry.snapshot);
                let outcome = run_one(&entry, &config, tolerance, &session, template, &snapshot_path, checkpoint_every, services);
                let result = update(i, &|t| {
                    t.finished_at_ms = Some(now_ms());
                    if let Some(tree) = &outcome.tree {
                        t.iterations_done = tree.iterations_done;
                        t.answer_nodes = tree.answer_node_ids.len();
                    }
                    match &outcome.error {
                        None => {
                            t.status = TaskStatus::Done;
                            if let Some(tree) = &outcome.tree {
                                let labels = final_labels(tree);
                                t.final_answer = labels.as_ref().map(|l| l.to_label_string());
                                t.correct = match (t.task.expected_labels(), &labels) {
                                    (Some(exp), Some(got)) => Some(Grader::new(exp, tolerance).grade(got)),
                                    (Some(_), None) => Some(false),
                                    _ => None,
                                };
                            }
                        }
                        Some(e) => {
                            t.status = TaskStatus::Failed;
                            t.error = Some(e.clone());
                        }
                    }
                });
                if let Err(e) = result {
                    *fatal.lock().expect("fatal lock") = Some(e);
                    return;
                }
            });
        }
    });

    if let Some(e) = fatal.into_inner().expect("fatal lock") {
        return Err(e);
    }
    Ok(shared.into_inner().expect("manifest lock"))
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    entry: &TaskEntry,
    config: &SearchConfig,
    tolerance: Tolerance,
    session: &SessionSpec,
    template: &PromptTemplate,
    snapshot_path: &Path,
    checkpoint_every: Option<u32>,
    services: &Services<'_>,
) -> TaskOutcome {
    let task = &entry.task;
    let mut tree = if snapshot_path.exists() {
        match persist::read_tree(snapshot_path) {
            Ok(t) if t.task_id == task.task_id && t.rng_seed == entry.seed => t,
            Ok(_) => {
                return TaskOutcome { tree: None, error: Some("snapshot belongs to a different task or seed".into()) };
            }
            Err(e) => {
                return TaskOutcome { tree: None, error: Some(format!("corrupt snapshot: {e}")) };
            }
        }
    } else {
        SearchTree::new(task.task_id.clone(), render_task_prompt(task, template), config.clone(), entry.seed)
    };
    let grader = task.expected_labels().map(|l| Grader::new(l, tolerance));
    let mut session = session.clone();
    if task.data_dir.is_some() {
        session.data_dir = task.data_dir.clone();
    }
    let deps = SearchDeps {
        policy: services.policy,
        executor: services.executor,
        value: services.value,
        grader: grader.as_ref(),
        session,
        tokens: services.tokens,
    };
    let mut checkpoint_error = None;
    let run = continue_search(&mut tree, &deps, None, |t, report| {
        if checkpoint_every.is_some_and(|k| k > 0 && report.iteration % k == 0) {
            if let Err(e) = persist::save_tree(t, snapshot_path) {
                checkpoint_error.get_or_insert(e.to_string());
            }
        }
    });
    let save = persist::save_tree(&tree, snapshot_path);
    let error = match (run, save) {
        (Err(e), _) => {
            tracing::warn!(task = %task.task_id, error = %e, "task failed");
            Some(e.to_string())
        }
        (Ok(_), Err(e)) => Some(format!("snapshot write failed: {e}")),
        (Ok(_), Ok(())) => checkpoint_error.map(|e| format!("checkpoint write failed: {e}")),
    };
    TaskOutcome { tree: Some(tree), error }
}

/// Loads every snapshot of a run, in manifest order, skipping tasks
/// without one.
pub fn load_run_trees(out_dir: impl AsRef<Path>) -> Result<Vec<SearchTree>, OrchestratorError> {
    let dir = out_dir.as_ref();
    let manifest = RunManifest::load(dir)?;
    let mut trees = Vec::new();
    for t in &manifest.tasks {
        let path = dir.join(&t.snapshot);
        if !path.exists() {
            continue;
        }
        let tree = persist::read_tree(&path).map_err(|e| match e {
            PersistError::Io(io) => OrchestratorError::Io(io),
            other => OrchestratorError::Manifest(format!("{}: {other}", path.display())),
        })?;
        trees.push(tree);
    }
    Ok(trees)
}

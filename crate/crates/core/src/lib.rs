//! Value-guided Monte Carlo Tree Search over notebook states.
//!
//! The engine treats a code-executing agent task as a tree search: every node
//! is a notebook state (thought, code cell, execution output), children are
//! sampled from a policy service, code runs in a sandbox, and rewards or value
//! estimates are backpropagated so PUCT selection can focus on promising
//! branches. Finished trees are persisted and turned into per-node
//! `(conversation, Q)` records for value-model training.
//!
//! Module map:
//!
//! * [`search`]: tree, PUCT selection, expansion and backpropagation loop.
//! * [`gateway`]: policy / value-estimator contracts, HTTP clients, mocks, token budgets.
//! * [`protocol`]: task prompt rendering, ReAct turn parsing, `@name[value]` labels.
//! * [`sandbox`]: code-cell execution with path replay and timeouts.
//! * [`evaluator`]: answer grading cascade and answer aggregation.
//! * [`trajectory`]: terminal-path extraction, sampling and JSONL emission.
//! * [`persist`]: byte-stable tree snapshots.
//! * [`orchestrator`]: task loading, batch runs, manifests and resume.
//! * [`sim`]: synthetic scenarios for exercising the search at desk scale.

pub mod evaluator;
pub mod gateway;
pub mod orchestrator;
pub mod persist;
pub mod protocol;
pub mod sandbox;
pub mod search;
pub mod sim;
pub mod trajectory;
pub mod util;

pub use evaluator::{AnswerCandidate, Grader, ParsedValue, Tolerance};
pub use gateway::{
    Message, Policy, PolicyCandidate, Role, SamplingParams, TokenEstimator, ValueEstimator,
};
pub use protocol::{AnswerLabels, TaskSpec, TurnKind, TurnParse};
pub use sandbox::{ExecStatus, ExecutionResult, Executor, SessionSpec};
pub use search::{
    NodeId, NodeStatus, Phase, SearchConfig, SearchDeps, SearchError, SearchNode, SearchResult,
    SearchTree,
};

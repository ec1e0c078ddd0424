//! Tree search over notebook states.
//!
//! Each iteration selects a leaf by PUCT descent, samples K thought/action
//! candidates for it, executes the code candidates, attaches one child per
//! candidate and backpropagates either a terminal reward or a value estimate
//! along the path to the root.

mod config;
mod engine;
mod tree;

use thiserror::Error;

use crate::gateway::GatewayError;
use crate::sandbox::SandboxError;

pub use config::{ErrorBudgetMode, FinalSelection, Phase, PriorMode, SamplingSettings, SearchConfig};
pub use engine::{
    answer_candidates, continue_search, final_labels, finish, run_iteration, run_search, IterationReport, SearchDeps,
    SearchResult, StopReason, TerminalEvent,
};
pub use tree::{puct_score, NodeId, NodeStatus, SearchNode, SearchTree, TerminalReason};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is terminal and cannot be expanded")]
    ParentTerminal(NodeId),
    #[error("node {0} is already terminal")]
    AlreadyTerminal(NodeId),
    #[error("node {parent} at depth {depth} cannot take children (max depth {max_depth})")]
    DepthExceeded { parent: NodeId, depth: usize, max_depth: usize },
    #[error("no expandable node remains in the tree")]
    SelectionExhausted,
    #[error("iteration budget of {0} exhausted")]
    BudgetExhausted(u32),
    #[error(transparent)]
    Service(#[from] GatewayError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
}

//! Tree snapshots: one JSON document per tree with every node's statistics,
//! its own messages, and enough structure to resume the search exactly.
//!
//! Output is byte-stable: fields are written in declaration order and floats
//! use the shortest round-trip decimal form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Message;
use crate::protocol::{node_messages, AnswerLabels};
use crate::sandbox::ExecStatus;
use crate::search::{NodeId, NodeStatus, SearchConfig, SearchNode, SearchTree, TerminalReason};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("snapshot schema version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid snapshot: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub messages: Vec<Message>,
    pub thought: String,
    pub action_code: Option<String>,
    pub answer_text: Option<String>,
    pub observation: Option<String>,
    pub exec_status: Option<ExecStatus>,
    pub prior: f64,
    pub visits: u64,
    pub value_sum: f64,
    pub status: NodeStatus,
    pub reward: Option<f64>,
    pub terminal_reason: Option<TerminalReason>,
    pub labels: Option<AnswerLabels>,
    pub consecutive_errors: u32,
    pub timeout_poisoned: bool,
    pub terminal_revisits: u32,
    pub created_iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub schema_version: u32,
    pub task_id: String,
    pub rng_seed: u64,
    pub iterations_done: u32,
    pub config: SearchConfig,
    /// Answer nodes in discovery order.
    pub answer_node_ids: Vec<usize>,
    pub nodes: Vec<NodeRecord>,
}

impl TreeSnapshot {
    pub fn from_tree(tree: &SearchTree) -> Self {
        let nodes = tree
            .nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id.0,
                parent: n.parent.map(|p| p.0),
                depth: n.depth,
                messages: if n.is_root() { tree.prompt.clone() } else { node_messages(n) },
                thought: n.thought.clone(),
                action_code: n.action_code.clone(),
                answer_text: n.answer_text.clone(),
                observation: n.observation.clone(),
                exec_status: n.exec_status,
                prior: n.prior,
                visits: n.visit_count,
                value_sum: n.value_sum,
                status: n.status,
                reward: n.reward,
                terminal_reason: n.terminal_reason,
                labels: n.labels.clone(),
                consecutive_errors: n.consecutive_errors,
                timeout_poisoned: n.timeout_poisoned,
                terminal_revisits: n.terminal_revisits,
                created_iteration: n.created_iteration,
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            task_id: tree.task_id.clone(),
            rng_seed: tree.rng_seed,
            iterations_done: tree.iterations_done,
            config: tree.config.clone(),
            answer_node_ids: tree.answer_node_ids.iter().map(|n| n.0).collect(),
            nodes,
        }
    }

    pub fn into_tree(self) -> Result<SearchTree, PersistError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(PersistError::VersionMismatch { found: self.schema_version, expected: SCHEMA_VERSION });
        }
        let invalid = |m: String| Err(PersistError::Invalid(m));
        let Some(root) = self.nodes.first() else {
            return invalid("no root node".into());
        };
        if root.id != 0 || root.parent.is_some() || root.depth != 0 {
            return invalid("node 0 must be a parentless depth-0 root".into());
        }
        let prompt = root.messages.clone();
        let mut nodes: Vec<SearchNode> = Vec::with_capacity(self.nodes.len());
        let mut answer_count = 0;
        for (i, r) in self.nodes.into_iter().enumerate() {
            if r.id != i {
                return invalid(format!("node ids must be sequential, found {} at {i}", r.id));
            }
            if let Some(p) = r.parent {
                if p >= i {
                    return invalid(format!("node {i} has parent {p} that does not precede it"));
                }
                if nodes[p].depth + 1 != r.depth {
                    return invalid(format!("node {i} depth {} does not follow parent depth", r.depth));
                }
                nodes[p].children.push(NodeId(i));
            } else if i != 0 {
                return invalid(format!("node {i} has no parent"));
            }
            if (r.status != NodeStatus::Open) != r.reward.is_some() {
                return invalid(format!("node {i}: reward must be set exactly on terminal nodes"));
            }
            if (r.status == NodeStatus::Answer) != r.labels.is_some() {
                return invalid(format!("node {i}: labels must be set exactly on answer nodes"));
            }
            if r.status == NodeStatus::Answer {
                answer_count += 1;
            }
            nodes.push(SearchNode {
                id: NodeId(i),
                parent: r.parent.map(NodeId),
                children: Vec::new(),
                depth: r.depth,
                thought: r.thought,
                action_code: r.action_code,
                answer_text: r.answer_text,
                observation: r.observation,
                exec_status: r.exec_status,
                prior: r.prior,
                visit_count: r.visits,
                value_sum: r.value_sum,
                status: r.status,
                reward: r.reward,
                terminal_reason: r.terminal_reason,
                labels: r.labels,
                consecutive_errors: r.consecutive_errors,
                timeout_poisoned: r.timeout_poisoned,
                terminal_revisits: r.terminal_revisits,
                created_iteration: r.created_iteration,
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for &a in &self.answer_node_ids {
            if a >= nodes.len() || nodes[a].status != NodeStatus::Answer || !seen.insert(a) {
                return invalid(format!("answer list entry {a} is not a distinct answer node"));
            }
        }
        if seen.len() != answer_count {
            return invalid("answer list does not cover every answer node".into());
        }
        Ok(SearchTree {
            task_id: self.task_id,
            prompt,
            nodes,
            config: self.config,
            rng_seed: self.rng_seed,
            iterations_done: self.iterations_done,
            answer_node_ids: self.answer_node_ids.into_iter().map(NodeId).collect(),
        })
    }
}

/// Canonical snapshot document (pretty JSON with a trailing newline).
pub fn snapshot_tree(tree: &SearchTree) -> String {
    let mut s = serde_json::to_string_pretty(&TreeSnapshot::from_tree(tree)).expect("snapshot serializes");
    s.push('\n');
    s
}

pub fn load_tree(document: &str) -> Result<SearchTree, PersistError> {
    let raw: serde_json::Value = serde_json::from_str(document)?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != SCHEMA_VERSION {
        return Err(PersistError::VersionMismatch { found: version, expected: SCHEMA_VERSION });
    }
    serde_json::from_value::<TreeSnapshot>(raw)?.into_tree()
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, contents: &str) -> std::io::Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

pub fn save_tree(tree: &SearchTree, path: impl AsRef<Path>) -> std::io::Result<()> {
    write_atomic(path, &snapshot_tree(tree))
}

pub fn read_tree(path: impl AsRef<Path>) -> Result<SearchTree, PersistError> {
    load_tree(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::TurnParse;
    use crate::search::Phase;

    fn small_tree() -> SearchTree {
        let mut t = SearchTree::new("task", vec![Message::user("prompt")], SearchConfig::for_phase(Phase::Collection), 42);
        let a = t.attach_child(NodeId(0), &TurnParse::code("t", "x = 1"), 0.5).unwrap();
        t.node_mut(a).unwrap().observation = Some("".into());
        t.node_mut(a).unwrap().exec_status = Some(ExecStatus::Ok);
        let b = t.attach_child(NodeId(0), &TurnParse::answer("done", "@x[0.1]"), 0.5).unwrap();
        t.mark_terminal(b, NodeStatus::Answer, 1.0, TerminalReason::Answered).unwrap();
        t.backpropagate(a, 0.1).unwrap();
        t.backpropagate(b, 1.0).unwrap();
        t.iterations_done = 1;
        t
    }

    #[test]
    fn root_only_roundtrip() {
        let t = SearchTree::new("t", vec![Message::user("p")], SearchConfig::inference(), 0);
        let doc = snapshot_tree(&t);
        let back = load_tree(&doc).unwrap();
        assert_eq!(back, t);
        assert_eq!(snapshot_tree(&back), doc);
    }

    #[test]
    fn roundtrip_is_lossless() {
        let t = small_tree();
        let doc = snapshot_tree(&t);
        let back = load_tree(&doc).unwrap();
        assert_eq!(back, t);
        assert_eq!(snapshot_tree(&back), doc);
        assert!(doc.contains("\"visits\": 2"));
    }

    #[test]
    fn version_bump_is_rejected() {
        let doc = snapshot_tree(&small_tree()).replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(load_tree(&doc), Err(PersistError::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn structural_errors_are_reported() {
        let mut snap = TreeSnapshot::from_tree(&small_tree());
        snap.nodes[2].parent = Some(5);
        assert!(matches!(snap.into_tree(), Err(PersistError::Invalid(_))));
        let mut snap = TreeSnapshot::from_tree(&small_tree());
        snap.nodes[2].reward = None;
        assert!(matches!(snap.into_tree(), Err(PersistError::Invalid(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Code(usize, f64),
            Answer(usize, bool, f64),
            Fail(usize),
            Backprop(usize, f64),
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                (any::<usize>(), 0.0..1.0f64).prop_map(|(p, v)| Op::Code(p, v)),
                (any::<usize>(), any::<bool>(), -1.0..1.0f64).prop_map(|(p, c, v)| Op::Answer(p, c, v)),
                any::<usize>().prop_map(Op::Fail),
                (any::<usize>(), -1.0..1.0f64).prop_map(|(n, v)| Op::Backprop(n, v)),
            ]
        }

        fn build(ops: &[Op], seed: u64) -> SearchTree {
            let mut cfg = SearchConfig::for_phase(Phase::Collection);
            cfg.max_depth = 6;
            let mut t = SearchTree::new("prop", vec![Message::system("s"), Message::user("q")], cfg, seed);
            for (i, op) in ops.iter().enumerate() {
                t.iterations_done = i as u32;
                let open: Vec<NodeId> = t
                    .nodes
                    .iter()
                    .filter(|n| !n.is_terminal() && n.depth < t.config.max_depth)
                    .map(|n| n.id)
                    .collect();
                match *op {
                    Op::Code(p, prior) if !open.is_empty() => {
                        let id = t.attach_child(open[p % open.len()], &TurnParse::code("t", format!("v{i} = {prior}")), prior).unwrap();
                        let n = t.node_mut(id).unwrap();
                        n.observation = Some(format!("out {i}"));
                        n.exec_status = Some(if i % 3 == 0 { ExecStatus::Error } else { ExecStatus::Ok });
                        n.consecutive_errors = (i % 3) as u32;
                        n.timeout_poisoned = i % 7 == 0;
                    }
                    Op::Answer(p, correct, v) if !open.is_empty() => {
                        let ans = format!("@k[{}]", if correct { 1 } else { i });
                        let id = t.attach_child(open[p % open.len()], &TurnParse::answer("a", ans), 0.25).unwrap();
                        t.mark_terminal(id, NodeStatus::Answer, v, TerminalReason::Answered).unwrap();
                        t.node_mut(id).unwrap().terminal_revisits = (i % 3) as u32;
                    }
                    Op::Fail(p) if !open.is_empty() => {
                        let id = t.attach_child(open[p % open.len()], &TurnParse::malformed("junk"), 0.5).unwrap();
                        t.mark_terminal(id, NodeStatus::Error, -1.0, TerminalReason::Malformed).unwrap();
                    }
                    Op::Backprop(n, v) => {
                        let id = NodeId(n % t.len());
                        t.backpropagate(id, v).unwrap();
                    }
                    _ => {}
                }
            }
            t
        }

        proptest! {
            #[test]
            fn snapshot_roundtrip(ops in proptest::collection::vec(op(), 0..80), seed in any::<u64>()) {
                let t = build(&ops, seed);
                let doc = snapshot_tree(&t);
                let back = load_tree(&doc).unwrap();
                prop_assert_eq!(&back, &t);
                prop_assert_eq!(snapshot_tree(&back), doc);
            }
        }
    }
}

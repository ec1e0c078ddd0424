use std::fmt;

use serde::{Deserialize, Serialize};

use super::{SearchConfig, SearchError};
use crate::gateway::Message;
use crate::protocol::{AnswerLabels, TurnParse};
use crate::sandbox::ExecStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Open,
    Answer,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Answered,
    Malformed,
    ErrorBudget,
    MaxDepth,
    TokenLimit,
}

/// PUCT score of a child: `q + c_puct * prior * sqrt(parent_visits) / (1 + visits)`.
pub fn puct_score(q: f64, prior: f64, parent_visits: u64, visits: u64, c_puct: f64) -> f64 {
    q + c_puct * prior * (parent_visits as f64).sqrt() / (1.0 + visits as f64)
}

/// One notebook state.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub depth: usize,
    pub thought: String,
    pub action_code: Option<String>,
    pub answer_text: Option<String>,
    pub observation: Option<String>,
    pub exec_status: Option<ExecStatus>,
    pub prior: f64,
    pub visit_count: u64,
    pub value_sum: f64,
    pub status: NodeStatus,
    pub reward: Option<f64>,
    pub terminal_reason: Option<TerminalReason>,
    pub labels: Option<AnswerLabels>,
    pub consecutive_errors: u32,
    pub timeout_poisoned: bool,
    pub terminal_revisits: u32,
    /// Iteration (1-based) that created the node; 0 for the root.
    pub created_iteration: u32,
}

impl SearchNode {
    fn root() -> Self {
        Self {
            id: NodeId(0),
            parent: None,
            children: Vec::new(),
            depth: 0,
            thought: String::new(),
            action_code: None,
            answer_text: None,
            observation: None,
            exec_status: None,
            prior: 1.0,
            visit_count: 0,
            value_sum: 0.0,
            status: NodeStatus::Open,
            reward: None,
            terminal_reason: None,
            labels: None,
            consecutive_errors: 0,
            timeout_poisoned: false,
            terminal_revisits: 0,
            created_iteration: 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.status != NodeStatus::Open
    }

    pub fn is_root(&self) -> bool {
        self.parent.is_none()
    }

    /// Mean backpropagated value, defined once the node has been visited.
    pub fn q(&self) -> Option<f64> {
        (self.visit_count > 0).then(|| self.value_sum / self.visit_count as f64)
    }

    /// Q used during selection: 0 for unvisited nodes.
    pub fn q_or_zero(&self) -> f64 {
        self.q().unwrap_or(0.0)
    }

    /// The turn this node was created from.
    pub fn turn(&self) -> TurnParse {
        match (&self.action_code, &self.answer_text) {
            (Some(code), _) => TurnParse::code(self.thought.clone(), code.clone()),
            (None, Some(answer)) => TurnParse::answer(self.thought.clone(), answer.clone()),
            (None, None) => TurnParse::malformed(self.thought.clone()),
        }
    }
}

/// Rooted search tree for one task. Node ids are indices into `nodes` and are
/// assigned sequentially, so a child's id is always greater than its parent's.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    pub task_id: String,
    /// Rendered task prompt; the root's context.
    pub prompt: Vec<Message>,
    pub nodes: Vec<SearchNode>,
    pub config: SearchConfig,
    pub rng_seed: u64,
    pub iterations_done: u32,
    pub answer_node_ids: Vec<NodeId>,
}

impl SearchTree {
    pub fn new(task_id: impl Into<String>, prompt: Vec<Message>, config: SearchConfig, rng_seed: u64) -> Self {
        Self {
            task_id: task_id.into(),
            prompt,
            nodes: vec![SearchNode::root()],
            config,
            rng_seed,
            iterations_done: 0,
            answer_node_ids: Vec::new(),
        }
    }

    pub fn root_id(&self) -> NodeId {
        NodeId(0)
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&SearchNode, SearchError> {
        self.nodes.get(id.0).ok_or(SearchError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut SearchNode, SearchError> {
        self.nodes.get_mut(id.0).ok_or(SearchError::UnknownNode(id))
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path_to(&self, id: NodeId) -> Result<Vec<NodeId>, SearchError> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent {
            path.push(p);
            cur = self.node(p)?;
        }
        path.reverse();
        Ok(path)
    }

    /// Creates an open child under a non-terminal parent.
    pub fn attach_child(&mut self, parent: NodeId, turn: &TurnParse, prior: f64) -> Result<NodeId, SearchError> {
        let max_depth = self.config.max_depth;
        let p = self.node(parent)?;
        if p.is_terminal() {
            return Err(SearchError::ParentTerminal(parent));
        }
        if p.depth >= max_depth {
            return Err(SearchError::DepthExceeded { parent, depth: p.depth, max_depth });
        }
        let id = NodeId(self.nodes.len());
        let node = SearchNode {
            id,
            parent: Some(parent),
            depth: p.depth + 1,
            thought: turn.thought.clone(),
            action_code: turn.code.clone(),
            answer_text: turn.answer_text.clone(),
            prior,
            consecutive_errors: p.consecutive_errors,
            timeout_poisoned: p.timeout_poisoned,
            created_iteration: self.iterations_done + 1,
            ..SearchNode::root()
        };
        self.nodes.push(node);
        self.nodes[parent.0].children.push(id);
        Ok(id)
    }

    /// Adds one visit and `value` to `id` and every ancestor.
    pub fn backpropagate(&mut self, id: NodeId, value: f64) -> Result<(), SearchError> {
        self.node(id)?;
        let mut cur = Some(id);
        while let Some(n) = cur {
            let node = &mut self.nodes[n.0];
            node.visit_count += 1;
            node.value_sum += value;
            cur = node.parent;
        }
        Ok(())
    }

    /// Freezes a childless node as terminal with a fixed reward.
    pub fn mark_terminal(
        &mut self,
        id: NodeId,
        status: NodeStatus,
        reward: f64,
        reason: TerminalReason,
    ) -> Result<(), SearchError> {
        let node = self.node_mut(id)?;
        if node.is_terminal() || !node.children.is_empty() || status == NodeStatus::Open {
            return Err(SearchError::AlreadyTerminal(id));
        }
        node.status = status;
        node.reward = Some(reward);
        node.terminal_reason = Some(reason);
        if status == NodeStatus::Answer {
            let labels = AnswerLabels::parse(node.answer_text.as_deref().unwrap_or(""));
            node.labels = Some(labels);
            self.answer_node_ids.push(id);
        }
        Ok(())
    }

    pub fn has_open_leaf(&self) -> bool {
        self.nodes.iter().any(|n| n.status == NodeStatus::Open && n.children.is_empty())
    }

    /// Whether each node can still be reached by descent: an open node whose
    /// subtree holds an open leaf, or a terminal node under its re-visit limit.
    fn live_mask(&self) -> Vec<bool> {
        let limit = self.config.terminal_revisit_limit;
        let mut live = vec![false; self.nodes.len()];
        // children always have larger ids than their parent
        for n in self.nodes.iter().rev() {
            live[n.id.0] = match n.status {
                NodeStatus::Open => n.children.is_empty() || n.children.iter().any(|c| live[c.0]),
                _ => n.terminal_revisits < limit,
            };
        }
        live
    }

    /// PUCT descent from the root to a childless node. Ties go to the lowest
    /// id. Fails when no open leaf remains anywhere in the tree.
    pub fn select_node(&self) -> Result<NodeId, SearchError> {
        if !self.has_open_leaf() {
            return Err(SearchError::SelectionExhausted);
        }
        let live = self.live_mask();
        let c_puct = self.config.c_puct;
        let mut cur = &self.nodes[0];
        while !cur.children.is_empty() {
            let mut best: Option<(f64, NodeId)> = None;
            for &cid in &cur.children {
                if !live[cid.0] {
                    continue;
                }
                let child = &self.nodes[cid.0];
                let score = puct_score(child.q_or_zero(), child.prior, cur.visit_count, child.visit_count, c_puct);
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, cid));
                }
            }
            match best {
                Some((_, id)) => cur = &self.nodes[id.0],
                None => return Err(SearchError::SelectionExhausted),
            }
        }
        Ok(cur.id)
    }
}

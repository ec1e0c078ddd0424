//! Turns finished trees into value-model training data: terminal paths are
//! enumerated, filtered (timeouts, duplicates), sampled per class, and every
//! node on a sampled path becomes one `(conversation, Q)` record.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{conversation_tokens, Message, TokenEstimator, POLICY_INPUT_BUDGET};
use crate::protocol::assemble_conversation;
use crate::search::{NodeId, NodeStatus, SearchError, SearchTree};
use crate::util::{derive_seed, stable_hash_hex};

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalPath {
    /// Root first, terminal node last.
    pub node_ids: Vec<NodeId>,
    pub terminal_reward: f64,
    pub correct: bool,
    pub timeout_poisoned: bool,
    pub content_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathLabel {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task_id: String,
    pub node_id: usize,
    pub path_label: PathLabel,
    pub q_value: f64,
    pub conversation: Vec<Message>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Tree(#[from] SearchError),
}

/// One path per terminal node, in node-id order.
pub fn enumerate_terminal_paths(tree: &SearchTree) -> Vec<TerminalPath> {
    let reward_correct = tree.config.reward_correct;
    tree.nodes
        .iter()
        .filter(|n| n.is_terminal())
        .filter_map(|leaf| {
            let node_ids = tree.path_to(leaf.id).ok()?;
            let mut poisoned = false;
            let mut texts = Vec::with_capacity(node_ids.len());
            for id in &node_ids {
                let n = tree.node(*id).ok()?;
                poisoned |= n.timeout_poisoned;
                if !n.is_root() {
                    texts.push(n.turn().render());
                }
            }
            let terminal_reward = leaf.reward?;
            Some(TerminalPath {
                node_ids,
                terminal_reward,
                correct: leaf.status == NodeStatus::Answer && terminal_reward == reward_correct,
                timeout_poisoned: poisoned,
                content_hash: stable_hash_hex(texts.iter().map(String::as_bytes)),
            })
        })
        .collect()
}

/// Drops poisoned paths, removes content duplicates (first wins), then draws
/// up to `max_correct` correct and `max_incorrect` incorrect paths uniformly
/// without replacement. Output keeps input order.
pub fn sample_paths(paths: &[TerminalPath], max_correct: usize, max_incorrect: usize, seed: u64) -> Vec<TerminalPath> {
    let mut seen = BTreeSet::new();
    let clean: Vec<&TerminalPath> = paths
        .iter()
        .filter(|p| !p.timeout_poisoned)
        .filter(|p| seen.insert(p.content_hash.clone()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; clean.len()];
    for (want_correct, cap) in [(true, max_correct), (false, max_incorrect)] {
        let class: Vec<usize> = (0..clean.len()).filter(|&i| clean[i].correct == want_correct).collect();
        let take = cap.min(class.len());
        for pick in rand::seq::index::sample(&mut rng, class.len(), take) {
            keep[class[pick]] = true;
        }
    }
    clean
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub records: Vec<TrajectoryRecord>,
    /// Records dropped because their conversation exceeded the budget.
    pub dropped_over_budget: usize,
}

/// One record per distinct non-root node on the given paths, labelled by the
/// first path that reaches it. `q_value` is the node's current Q clamped to
/// `[-1, 1]`.
pub fn emit_training_records(
    tree: &SearchTree,
    paths: &[TerminalPath],
    input_budget: usize,
    tokens: &dyn TokenEstimator,
) -> Result<Extraction, SearchError> {
    let mut emitted = BTreeSet::new();
    let mut out = Extraction { records: Vec::new(), dropped_over_budget: 0 };
    for path in paths {
        let label = if path.correct { PathLabel::Correct } else { PathLabel::Incorrect };
        for &id in path.node_ids.iter().skip(1) {
            if !emitted.insert(id) {
                continue;
            }
            let conversation = assemble_conversation(tree, id)?;
            if conversation_tokens(&conversation, tokens) > input_budget {
                out.dropped_over_budget += 1;
                continue;
            }
            let node = tree.node(id)?;
            out.records.push(TrajectoryRecord {
                task_id: tree.task_id.clone(),
                node_id: id.0,
                path_label: label,
                q_value: node.q().unwrap_or(0.0).clamp(-1.0, 1.0),
                conversation,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractOptions {
    pub max_correct: usize,
    pub max_incorrect: usize,
    pub seed: u64,
    pub input_budget: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { max_correct: 4, max_incorrect: 4, seed: 0, input_budget: POLICY_INPUT_BUDGET }
    }
}

/// Enumerate, sample (seeded per task) and emit for one tree.
pub fn extract_tree(tree: &SearchTree, opts: &ExtractOptions, tokens: &dyn TokenEstimator) -> Result<Extraction, SearchError> {
    let paths = enumerate_terminal_paths(tree);
    let seed = derive_seed(opts.seed, &tree.task_id);
    let selected = sample_paths(&paths, opts.max_correct, opts.max_incorrect, seed);
    emit_training_records(tree, &selected, opts.input_budget, tokens)
}

/// Writes one JSON record per line; returns the number of lines written.
pub fn write_dataset(records: &[TrajectoryRecord], path: impl AsRef<Path>) -> Result<usize, DatasetError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records.len())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>, DatasetError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

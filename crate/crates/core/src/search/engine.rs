use serde::{Deserialize, Serialize};

use super::config::{ErrorBudgetMode, FinalSelection, Phase, PriorMode};
use super::tree::{NodeId, NodeStatus, SearchTree, TerminalReason};
use super::{SearchConfig, SearchError};
use crate::evaluator::{self, AnswerCandidate, Grader};
use crate::gateway::{
    conversation_tokens, estimate_value, generate_candidates, Message, Policy, PolicyCandidate,
    SamplingParams, TokenEstimator, ValueEstimator,
};
use crate::protocol::{
    assemble_conversation, extend_conversation, parse_turn, render_task_prompt, AnswerLabels,
    PromptTemplate, TaskSpec, TurnKind, TurnParse,
};
use crate::sandbox::{execute_node_path, replay_cells, ExecStatus, Executor, NodeExecution, SessionSpec};
use crate::util::stable_hash64;

/// External services one search talks to.
pub struct SearchDeps<'a> {
    pub policy: &'a dyn Policy,
    pub executor: &'a dyn Executor,
    pub value: Option<&'a dyn ValueEstimator>,
    /// Ground truth; required to grade answers in the collection phase.
    pub grader: Option<&'a Grader>,
    pub session: SessionSpec,
    pub tokens: &'a dyn TokenEstimator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalEvent {
    pub node: NodeId,
    pub reason: TerminalReason,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub selected: NodeId,
    /// The selected node was terminal and its reward was re-applied.
    pub revisit: bool,
    pub created: Vec<NodeId>,
    pub terminal_events: Vec<TerminalEvent>,
    /// Every `(target, value)` backpropagation performed, in order.
    pub backprops: Vec<(NodeId, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Exhausted,
    EarlyStop,
    Paused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub tree: SearchTree,
    pub answer_node_ids: Vec<NodeId>,
    pub final_labels: Option<AnswerLabels>,
    pub stop_reason: StopReason,
}

/// What one candidate turns into before the tree is touched.
struct Planned {
    turn: TurnParse,
    prior: f64,
    observation: Option<String>,
    exec_status: Option<ExecStatus>,
    consecutive_errors: u32,
    poisoned: bool,
    terminal: Option<(NodeStatus, TerminalReason)>,
    value: f64,
}

fn priors(candidates: &[PolicyCandidate], mode: PriorMode) -> Vec<f64> {
    let k = candidates.len().max(1) as f64;
    let uniform = vec![1.0 / k; candidates.len()];
    if mode == PriorMode::Uniform {
        return uniform;
    }
    let Some(lps) = candidates.iter().map(|c| c.mean_logprob).collect::<Option<Vec<f64>>>() else {
        return uniform;
    };
    let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = lps.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return uniform;
    }
    weights.into_iter().map(|w| w / total).collect()
}

fn expansion_seed(tree: &SearchTree, node: NodeId) -> u64 {
    stable_hash64([&tree.rng_seed.to_le_bytes()[..], &(node.0 as u64).to_le_bytes()[..]])
}

fn score_or_default(deps: &SearchDeps<'_>, config: &SearchConfig, conversation: &[Message]) -> f64 {
    let Some(est) = deps.value else {
        return config.default_backprop_value;
    };
    match estimate_value(est, conversation, config.value_input_tokens, deps.tokens) {
        Ok(v) => v,
        Err(e) => {
            tracing::warn!(error = %e, "value estimate failed, using default");
            config.default_backprop_value
        }
    }
}

fn execute_all(
    deps: &SearchDeps<'_>,
    ancestors: &[String],
    turns: &[TurnParse],
    parallel: bool,
) -> Result<Vec<Option<NodeExecution>>, SearchError> {
    let run = |t: &TurnParse| -> Result<Option<NodeExecution>, SearchError> {
        match (&t.kind, &t.code) {
            (TurnKind::Code, Some(code)) => {
                Ok(Some(execute_node_path(deps.executor, &deps.session, ancestors, code)?))
            }
            _ => Ok(None),
        }
    };
    let code_count = turns.iter().filter(|t| t.kind == TurnKind::Code).count();
    if !parallel || code_count < 2 {
        return turns.iter().map(run).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = turns.iter().map(|t| s.spawn(move || run(t))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("execution worker panicked"))
            .collect()
    })
}

/// Runs one select / expand / evaluate / backpropagate iteration.
///
/// All service calls happen before the tree is modified, so a service
/// failure leaves the tree untouched and the iteration uncounted.
pub fn run_iteration(tree: &mut SearchTree, deps: &SearchDeps<'_>) -> Result<IterationReport, SearchError> {
    let config = tree.config.clone();
    if tree.iterations_done >= config.max_iterations {
        return Err(SearchError::BudgetExhausted(config.max_iterations));
    }
    let selected = tree.select_node()?;
    let iteration = tree.iterations_done + 1;
    let mut report = IterationReport {
        iteration,
        selected,
        revisit: false,
        created: Vec::new(),
        terminal_events: Vec::new(),
        backprops: Vec::new(),
    };

    let sel = tree.node(selected)?;
    if sel.is_terminal() {
        let reward = sel.reward.unwrap_or(config.reward_failure);
        tree.node_mut(selected)?.terminal_revisits += 1;
        tree.backpropagate(selected, reward)?;
        report.revisit = true;
        report.backprops.push((selected, reward));
        tree.iterations_done = iteration;
        return Ok(report);
    }
    let parent_depth = sel.depth;
    let parent_errors = sel.consecutive_errors;
    let parent_poisoned = sel.timeout_poisoned;

    let conversation = assemble_conversation(tree, selected)?;
    if conversation_tokens(&conversation, deps.tokens) > config.max_input_tokens {
        tree.mark_terminal(selected, NodeStatus::Error, config.reward_failure, TerminalReason::TokenLimit)?;
        tree.backpropagate(selected, config.reward_failure)?;
        report.terminal_events.push(TerminalEvent {
            node: selected,
            reason: TerminalReason::TokenLimit,
            reward: config.reward_failure,
        });
        report.backprops.push((selected, config.reward_failure));
        tree.iterations_done = iteration;
        return Ok(report);
    }

    let params = SamplingParams {
        temperature: config.sampling.temperature,
        top_p: config.sampling.top_p,
        max_output_tokens: config.sampling.max_output_tokens,
        n: config.k_expansions,
        seed: Some(expansion_seed(tree, selected)),
        logprobs: config.prior_mode == PriorMode::Logprob,
    };
    let candidates = generate_candidates(deps.policy, &conversation, &params)?;
    let priors = priors(&candidates, config.prior_mode);
    let turns: Vec<TurnParse> = candidates.iter().map(|c| parse_turn(&c.text)).collect();
    let ancestors = replay_cells(tree, selected)?;
    let executions = execute_all(deps, &ancestors, &turns, config.parallel_exec)?;

    let child_depth = parent_depth + 1;
    let mut planned = Vec::with_capacity(turns.len());
    for ((turn, prior), exec) in turns.into_iter().zip(priors).zip(executions) {
        let mut p = Planned {
            turn,
            prior,
            observation: None,
            exec_status: None,
            consecutive_errors: parent_errors,
            poisoned: parent_poisoned,
            terminal: None,
            value: config.reward_failure,
        };
        match p.turn.kind {
            TurnKind::Malformed => {
                p.terminal = Some((NodeStatus::Error, TerminalReason::Malformed));
            }
            TurnKind::Answer => {
                p.terminal = Some((NodeStatus::Answer, TerminalReason::Answered));
                p.value = match config.phase {
                    Phase::Collection => {
                        let labels = AnswerLabels::parse(p.turn.answer_text.as_deref().unwrap_or(""));
                        let correct = deps.grader.is_some_and(|g| g.grade(&labels));
                        if correct { config.reward_correct } else { config.reward_failure }
                    }
                    Phase::Inference => {
                        let conv = extend_conversation(&conversation, &p.turn, None);
                        score_or_default(deps, &config, &conv)
                    }
                };
            }
            TurnKind::Code => {
                let exec = exec.expect("code candidates are executed");
                let ok = exec.result.is_ok();
                p.exec_status = Some(exec.result.status);
                p.observation = Some(exec.result.observation());
                p.poisoned |= exec.replay_diverged || exec.result.status == ExecStatus::Timeout;
                p.consecutive_errors = match (ok, config.error_budget_mode) {
                    (true, ErrorBudgetMode::Consecutive) => 0,
                    (true, ErrorBudgetMode::Total) => parent_errors,
                    (false, _) => parent_errors + 1,
                };
                if !ok && p.consecutive_errors >= config.max_consecutive_errors {
                    p.terminal = Some((NodeStatus::Error, TerminalReason::ErrorBudget));
                } else if child_depth >= config.max_depth {
                    p.terminal = Some((NodeStatus::Error, TerminalReason::MaxDepth));
                } else {
                    let conv = extend_conversation(&conversation, &p.turn, p.observation.as_deref());
                    p.value = score_or_default(deps, &config, &conv);
                }
            }
        }
        planned.push(p);
    }

    for p in planned {
        let id = tree.attach_child(selected, &p.turn, p.prior)?;
        {
            let node = tree.node_mut(id)?;
            node.observation = p.observation;
            node.exec_status = p.exec_status;
            node.consecutive_errors = p.consecutive_errors;
            node.timeout_poisoned = p.poisoned;
        }
        if let Some((status, reason)) = p.terminal {
            tree.mark_terminal(id, status, p.value, reason)?;
            report.terminal_events.push(TerminalEvent { node: id, reason, reward: p.value });
        }
        tree.backpropagate(id, p.value)?;
        report.backprops.push((id, p.value));
        report.created.push(id);
    }
    tree.iterations_done = iteration;
    Ok(report)
}

/// Candidate answers in discovery order, valued by their Q.
pub fn answer_candidates(tree: &SearchTree) -> Vec<AnswerCandidate> {
    tree.answer_node_ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| {
            let n = tree.node(*id).ok()?;
            Some(AnswerCandidate {
                labels: n.labels.clone().unwrap_or_default(),
                value_estimate: n.q_or_zero(),
                discovery_index: i,
            })
        })
        .collect()
}

fn agreement_reached(tree: &SearchTree, needed: usize) -> bool {
    let cands = answer_candidates(tree);
    if cands.len() < needed {
        return false;
    }
    let mut counts = std::collections::BTreeMap::new();
    for c in &cands {
        let key: Vec<(String, String)> = c
            .labels
            .iter()
            .map(|l| (evaluator::normalize_name(&l.name), evaluator::coerce_value(&l.raw).canonical()))
            .collect::<std::collections::BTreeMap<_, _>>()
            .into_iter()
            .collect();
        let n = counts.entry(key).or_insert(0usize);
        *n += 1;
        if *n >= needed {
            return true;
        }
    }
    false
}

/// Iterates until the budget is spent, selection is exhausted, early stop
/// triggers, or `pause_at` iterations have been done. Reports are passed to
/// `on_iteration` as they happen.
pub fn continue_search(
    tree: &mut SearchTree,
    deps: &SearchDeps<'_>,
    pause_at: Option<u32>,
    mut on_iteration: impl FnMut(&SearchTree, &IterationReport),
) -> Result<StopReason, SearchError> {
    tree.config.validate()?;
    loop {
        if let Some(a) = tree.config.early_stop_agreement {
            if agreement_reached(tree, a) {
                return Ok(StopReason::EarlyStop);
            }
        }
        if tree.iterations_done >= tree.config.max_iterations {
            return Ok(StopReason::Budget);
        }
        if pause_at.is_some_and(|p| tree.iterations_done >= p) {
            return Ok(StopReason::Paused);
        }
        match run_iteration(tree, deps) {
            Ok(report) => on_iteration(tree, &report),
            Err(SearchError::SelectionExhausted) => return Ok(StopReason::Exhausted),
            Err(e) => return Err(e),
        }
    }
}

pub fn final_labels(tree: &SearchTree) -> Option<AnswerLabels> {
    let cands = answer_candidates(tree);
    match tree.config.final_selection {
        FinalSelection::None => None,
        FinalSelection::MajorityVote => evaluator::majority_vote(&cands).ok(),
        FinalSelection::ValueMax => evaluator::select_by_value(&cands).ok(),
    }
}

/// Runs a full search for one task from a fresh tree.
pub fn run_search(
    task: &TaskSpec,
    config: SearchConfig,
    rng_seed: u64,
    template: &PromptTemplate,
    deps: &SearchDeps<'_>,
) -> Result<SearchResult, SearchError> {
    let mut tree = SearchTree::new(task.task_id.clone(), render_task_prompt(task, template), config, rng_seed);
    let stop_reason = continue_search(&mut tree, deps, None, |_, _| {})?;
    Ok(finish(tree, stop_reason))
}

pub fn finish(tree: SearchTree, stop_reason: StopReason) -> SearchResult {
    let final_labels = final_labels(&tree);
    SearchResult { answer_node_ids: tree.answer_node_ids.clone(), final_labels, tree, stop_reason }
}

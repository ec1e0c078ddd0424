//! Synthetic single-correct-path environments for exercising the search.
//!
//! A scenario has `depth` levels. At level `L < depth - 1` the policy
//! chooses among `branching` no-op code cells `choose(L, option)` and only
//! `correct_action_index[L]` stays on the correct path. At the final level
//! the correct choice is to answer. Each sampled candidate is independently
//! a distractor with probability `policy_noise`; once off the path a branch
//! never answers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::evaluator::{majority_vote, Grader, Tolerance};
use crate::gateway::{
    GatewayError, HeuristicTokens, Message, Policy, PolicyCandidate, Role, SamplingParams, ValueEstimator,
};
use crate::protocol::{parse_turn, render_answer_turn, render_code_turn, AnswerLabels, PromptTemplate, TaskSpec, TurnKind};
use crate::sandbox::{ExecutionResult, SandboxError, SessionSpec};
use crate::search::{
    answer_candidates, continue_search, NodeStatus, Phase, SearchConfig, SearchDeps, SearchError, SearchTree,
};
use crate::util::stable_hash64;

pub const ORACLE_ON_PATH: f64 = 0.9;
pub const ORACLE_OFF_PATH: f64 = -0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub branching: usize,
    pub depth: usize,
    /// One entry per level; the last entry is the option slot the answer
    /// occupies and only matters for distractor choice.
    pub correct_action_index: Vec<usize>,
    pub answer_label: String,
    pub policy_noise: f64,
    pub seed: u64,
}

impl SyntheticScenario {
    /// Scenario with correct options drawn from `seed`.
    pub fn generate(branching: usize, depth: usize, policy_noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let correct_action_index = (0..depth).map(|_| rng.random_range(0..branching.max(1))).collect();
        Self {
            branching,
            depth,
            correct_action_index,
            answer_label: "@answer[42]".into(),
            policy_noise,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.branching == 0 || self.depth == 0 {
            return Err("branching and depth must be positive".into());
        }
        if self.correct_action_index.len() != self.depth {
            return Err(format!(
                "correct_action_index has {} entries, expected {}",
                self.correct_action_index.len(),
                self.depth
            ));
        }
        if !(0.0..=1.0).contains(&self.policy_noise) {
            return Err("policy_noise must lie in [0, 1]".into());
        }
        if AnswerLabels::parse(&self.answer_label).is_empty() {
            return Err("answer_label has no @name[value] pair".into());
        }
        Ok(())
    }

    pub fn task(&self) -> TaskSpec {
        let mut t = TaskSpec::new(format!("sim-{}", self.seed), "Find the hidden answer by choosing one option per level.");
        t.output_format = "@answer[value]".into();
        t.label = Some(self.answer_label.clone());
        t
    }

    /// Where a conversation stands: number of assistant turns and whether
    /// every one of them followed the correct path.
    pub fn locate(&self, messages: &[Message]) -> PathState {
        let mut level = 0;
        let mut on_path = true;
        let mut answered = false;
        for m in messages.iter().filter(|m| m.role == Role::Assistant) {
            let turn = parse_turn(&m.content);
            match turn.kind {
                TurnKind::Code => {
                    let step = turn.code.as_deref().and_then(parse_choice);
                    on_path &= level + 1 < self.depth && step == Some((level, self.correct_action_index[level]));
                }
                TurnKind::Answer => {
                    on_path &= level + 1 == self.depth;
                    answered = true;
                }
                TurnKind::Malformed => on_path = false,
            }
            level += 1;
        }
        PathState { level, on_path, answered }
    }

    fn candidate(&self, state: PathState, rng: &mut ChaCha8Rng) -> String {
        let level = state.level;
        let distractor = !state.on_path || rng.random_bool(self.policy_noise);
        if !distractor {
            if level + 1 == self.depth {
                return render_answer_turn("all checks passed", &self.answer_label);
            }
            return choice_turn(level, self.correct_action_index[level]);
        }
        let correct = self.correct_action_index.get(level).copied();
        let option = if state.on_path && self.branching > 1 {
            // uniform over the other options
            let c = correct.unwrap_or(0);
            let o = rng.random_range(0..self.branching - 1);
            if o >= c { o + 1 } else { o }
        } else if state.on_path {
            self.branching
        } else {
            rng.random_range(0..self.branching)
        };
        choice_turn(level, option)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathState {
    pub level: usize,
    pub on_path: bool,
    pub answered: bool,
}

fn choice_turn(level: usize, option: usize) -> String {
    render_code_turn(&format!("try option {option} at level {level}"), &format!("choose({level}, {option})"))
}

fn parse_choice(code: &str) -> Option<(usize, usize)> {
    let inner = code.trim().strip_prefix("choose(")?.strip_suffix(')')?;
    let (a, b) = inner.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// Scripted policy: deterministic given the scenario seed and the
/// per-expansion sampling seed.
#[derive(Debug, Clone)]
pub struct SimPolicy {
    pub scenario: SyntheticScenario,
}

impl Policy for SimPolicy {
    fn sample(&self, messages: &[Message], params: &SamplingParams) -> Result<Vec<PolicyCandidate>, GatewayError> {
        let state = self.scenario.locate(messages);
        let seed = stable_hash64([
            &self.scenario.seed.to_le_bytes()[..],
            &params.seed.unwrap_or(0).to_le_bytes()[..],
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..params.n)
            .map(|_| PolicyCandidate { text: self.scenario.candidate(state, &mut rng), mean_logprob: None })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ValueBackend {
    Oracle,
    Zero,
    /// Oracle plus Gaussian noise of standard deviation `sigma`, clamped.
    Noisy { sigma: f64 },
}

/// ±0.9 by path membership, optionally perturbed.
#[derive(Debug, Clone)]
pub struct OracleValue {
    pub scenario: SyntheticScenario,
    pub sigma: f64,
}

impl ValueEstimator for OracleValue {
    fn score(&self, messages: &[Message]) -> Result<f64, GatewayError> {
        let base = if self.scenario.locate(messages).on_path { ORACLE_ON_PATH } else { ORACLE_OFF_PATH };
        if self.sigma <= 0.0 {
            return Ok(base);
        }
        let key: Vec<&[u8]> = messages.iter().map(|m| m.content.as_bytes()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(
            std::iter::once(&self.scenario.seed.to_le_bytes()[..]).chain(key),
        ));
        let noise = Normal::new(0.0, self.sigma).map_err(|e| GatewayError::MalformedResponse {
            service: "oracle",
            detail: e.to_string(),
        })?;
        Ok((base + noise.sample(&mut rng)).clamp(-1.0, 1.0))
    }
}

/// Every cell succeeds with a short scripted observation.
pub fn sim_executor(_: &SessionSpec, cells: &[String]) -> Result<Vec<ExecutionResult>, SandboxError> {
    if cells.is_empty() {
        return Err(SandboxError::NoCells);
    }
    Ok(cells
        .iter()
        .map(|c| ExecutionResult::ok(format!("ran {}\n", c.trim())))
        .collect())
}

pub struct BuiltScenario {
    pub policy: SimPolicy,
    pub oracle: OracleValue,
    pub executor: fn(&SessionSpec, &[String]) -> Result<Vec<ExecutionResult>, SandboxError>,
    pub task: TaskSpec,
}

pub fn build_scenario(scenario: &SyntheticScenario) -> BuiltScenario {
    BuiltScenario {
        policy: SimPolicy { scenario: scenario.clone() },
        oracle: OracleValue { scenario: scenario.clone(), sigma: 0.0 },
        executor: sim_executor,
        task: scenario.task(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub name: String,
    pub c_puct: f64,
    pub value_backend: ValueBackend,
}

impl StrategyConfig {
    pub fn new(name: impl Into<String>, c_puct: f64, value_backend: ValueBackend) -> Self {
        Self { name: name.into(), c_puct, value_backend }
    }

    /// The value-model by exploration-term grid.
    pub fn ablation_grid(c_explore: f64) -> Vec<Self> {
        vec![
            Self::new("zero-vm/explore", c_explore, ValueBackend::Zero),
            Self::new("zero-vm/greedy", 0.0, ValueBackend::Zero),
            Self::new("oracle-vm/explore", c_explore, ValueBackend::Oracle),
            Self::new("oracle-vm/greedy", 0.0, ValueBackend::Oracle),
        ]
    }
}

/// Scenario shape shared by every seed of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioShape {
    pub branching: usize,
    pub depth: usize,
    pub policy_noise: f64,
    #[serde(default = "default_answer_label")]
    pub answer_label: String,
    /// Fixed correct options; drawn per seed when absent.
    #[serde(default)]
    pub correct_action_index: Option<Vec<usize>>,
}

fn default_answer_label() -> String {
    "@answer[42]".into()
}

impl ScenarioShape {
    pub fn instance(&self, seed: u64) -> SyntheticScenario {
        let mut s = SyntheticScenario::generate(self.branching, self.depth, self.policy_noise, seed);
        s.answer_label = self.answer_label.clone();
        if let Some(idx) = &self.correct_action_index {
            s.correct_action_index = idx.clone();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub solved: bool,
    pub first_correct_iteration: Option<u32>,
    pub iterations_run: u32,
    pub answer_nodes: usize,
    pub vote_correct: bool,
}

/// Runs one seed under one strategy.
pub fn run_seed(scenario: &SyntheticScenario, strategy: &StrategyConfig, budget: u32) -> Result<SeedOutcome, SearchError> {
    let built = build_scenario(scenario);
    let sigma = match strategy.value_backend {
        ValueBackend::Noisy { sigma } => sigma,
        _ => 0.0,
    };
    let oracle = OracleValue { sigma, ..built.oracle };
    let value: Option<&dyn ValueEstimator> = match strategy.value_backend {
        ValueBackend::Zero => None,
        _ => Some(&oracle),
    };
    let grader = Grader::new(AnswerLabels::parse(&scenario.answer_label), Tolerance::default());
    let deps = SearchDeps {
        policy: &built.policy,
        executor: &built.executor,
        value,
        grader: Some(&grader),
        session: SessionSpec::default(),
        tokens: &HeuristicTokens,
    };
    let mut config = SearchConfig::for_phase(Phase::Inference);
    config.c_puct = strategy.c_puct;
    config.k_expansions = scenario.branching;
    config.max_iterations = budget;
    config.max_depth = config.max_depth.max(scenario.depth + 1);
    config.parallel_exec = false;
    let prompt = crate::protocol::render_task_prompt(&built.task, &PromptTemplate::default());
    let mut tree = SearchTree::new(built.task.task_id.clone(), prompt, config, scenario.seed);
    continue_search(&mut tree, &deps, None, |_, _| {})?;
    Ok(outcome(&tree, &grader, scenario.seed))
}

fn outcome(tree: &SearchTree, grader: &Grader, seed: u64) -> SeedOutcome {
    let first_correct_iteration = tree
        .answer_node_ids
        .iter()
        .filter_map(|id| tree.node(*id).ok())
        .filter(|n| n.status == NodeStatus::Answer && n.labels.as_ref().is_some_and(|l| grader.grade(l)))
        .map(|n| n.created_iteration)
        .min();
    let vote_correct = majority_vote(&answer_candidates(tree)).is_ok_and(|l| grader.grade(&l));
    SeedOutcome {
        seed,
        solved: first_correct_iteration.is_some(),
        first_correct_iteration,
        iterations_run: tree.iterations_done,
        answer_nodes: tree.answer_node_ids.len(),
        vote_correct,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: String,
    pub c_puct: f64,
    pub value_backend: ValueBackend,
    pub seeds: usize,
    pub budget: u32,
    pub solved: usize,
    pub solve_rate: f64,
    /// Mean over solved seeds; absent when nothing was solved.
    pub mean_iterations_to_solve: Option<f64>,
    pub voting_accuracy: f64,
    pub outcomes: Vec<SeedOutcome>,
}

impl StrategyMetrics {
    fn from_outcomes(strategy: &StrategyConfig, budget: u32, outcomes: Vec<SeedOutcome>) -> Self {
        let n = outcomes.len();
        let firsts: Vec<f64> = outcomes.iter().filter_map(|o| o.first_correct_iteration).map(f64::from).collect();
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self {
            strategy: strategy.name.clone(),
            c_puct: strategy.c_puct,
            value_backend: strategy.value_backend,
            seeds: n,
            budget,
            solved: firsts.len(),
            solve_rate: rate(firsts.len()),
            mean_iterations_to_solve: (!firsts.is_empty()).then(|| firsts.iter().sum::<f64>() / firsts.len() as f64),
            voting_accuracy: rate(outcomes.iter().filter(|o| o.vote_correct).count()),
            outcomes,
        }
    }

    /// Fraction of seeds whose first correct answer appeared within each checkpoint.
    pub fn curve(&self, checkpoints: &[u32]) -> Vec<f64> {
        checkpoints
            .iter()
            .map(|&c| {
                let k = self.outcomes.iter().filter(|o| o.first_correct_iteration.is_some_and(|f| f <= c)).count();
                if self.outcomes.is_empty() { 0.0 } else { k as f64 / self.outcomes.len() as f64 }
            })
            .collect()
    }
}

fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("simulation worker panicked")).collect()
    })
}

/// Every strategy on the same (paired) seeds.
pub fn run_experiment(
    shape: &ScenarioShape,
    strategies: &[StrategyConfig],
    seeds: &[u64],
    budget: u32,
) -> Result<Vec<StrategyMetrics>, SearchError> {
    let scenarios: Vec<SyntheticScenario> = seeds.iter().map(|&s| shape.instance(s)).collect();
    if let Some(bad) = scenarios.iter().find_map(|s| s.validate().err()) {
        return Err(SearchError::InvalidConfig(bad));
    }
    strategies
        .iter()
        .map(|st| {
            let outcomes = parallel_map(&scenarios, |sc| run_seed(sc, st, budget))
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            Ok(StrategyMetrics::from_outcomes(st, budget, outcomes))
        })
        .collect()
}

/// Cumulative solve rate at each checkpoint for one strategy. One run at the
/// largest checkpoint suffices because a search's first `c` iterations do
/// not depend on its budget.
pub fn accuracy_vs_iterations(
    shape: &ScenarioShape,
    strategy: &StrategyConfig,
    seeds: &[u64],
    checkpoints: &[u32],
) -> Result<Vec<f64>, SearchError> {
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(SearchError::InvalidConfig("checkpoints must be ascending".into()));
    }
    let budget = checkpoints.last().copied().unwrap_or(0);
    let metrics = run_experiment(shape, std::slice::from_ref(strategy), seeds, budget)?;
    Ok(metrics[0].curve(checkpoints))
}

/// Aligned text table of the summary columns.
pub fn metrics_table(metrics: &[StrategyMetrics]) -> String {
    let header = ["strategy", "c_puct", "value", "seeds", "budget", "solve_rate", "mean_iters", "vote_acc"];
    let rows: Vec<[String; 8]> = metrics
        .iter()
        .map(|m| {
            [
                m.strategy.clone(),
                format!("{:.2}", m.c_puct),
                match m.value_backend {
                    ValueBackend::Oracle => "oracle".into(),
                    ValueBackend::Zero => "zero".into(),
                    ValueBackend::Noisy { sigma } => format!("noisy({sigma})"),
                },
                m.seeds.to_string(),
                m.budget.to_string(),
                format!("{:.2}", m.solve_rate),
                m.mean_iterations_to_solve.map_or("-".into(), |v| format!("{v:.2}")),
                format!("{:.2}", m.voting_accuracy),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// One JSON object per strategy, without per-seed detail.
pub fn metrics_jsonl(metrics: &[StrategyMetrics]) -> String {
    metrics
        .iter()
        .map(|m| {
            let mut v = serde_json::to_value(m).expect("metrics serialize");
            if let Some(obj) = v.as_object_mut() {
                obj.remove("outcomes");
            }
            v.to_string() + "\n"
        })
        .collect()
}

/// Experiment description accepted by the `simulate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: ScenarioShape,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyConfig>,
    /// Seeds `0..seeds`.
    pub seeds: u64,
    pub budget: u32,
    #[serde(default)]
    pub checkpoints: Vec<u32>,
}

fn default_strategies() -> Vec<StrategyConfig> {
    StrategyConfig::ablation_grid(1.25)
}

impl ExperimentSpec {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds).collect()
    }
}

/// Per-strategy curves keyed by strategy name.
pub fn curves(metrics: &[StrategyMetrics], checkpoints: &[u32]) -> BTreeMap<String, Vec<f64>> {
    metrics.iter().map(|m| (m.strategy.clone(), m.curve(checkpoints))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::run_iteration;

    fn shape(branching: usize, depth: usize, noise: f64) -> ScenarioShape {
        ScenarioShape {
            branching,
            depth,
            policy_noise: noise,
            answer_label: default_answer_label(),
            correct_action_index: None,
        }
    }

    fn greedy_oracle() -> StrategyConfig {
        StrategyConfig::new("oracle", 0.0, ValueBackend::Oracle)
    }

    #[test]
    fn first_expansion_answers_at_depth_one() {
        let sc = shape(3, 1, 0.0).instance(5);
        let built = build_scenario(&sc);
        let params = SamplingParams { n: 3, seed: Some(1), ..SamplingParams::default() };
        let prompt = crate::protocol::render_task_prompt(&built.task, &PromptTemplate::default());
        let cands = built.policy.sample(&prompt, &params).unwrap();
        assert_eq!(cands.len(), 3);
        assert!(cands.iter().all(|c| parse_turn(&c.text).kind == TurnKind::Answer));
    }

    #[test]
    fn full_noise_never_answers() {
        let m = run_experiment(&shape(3, 3, 1.0), &[greedy_oracle()], &[1, 2, 3], 30).unwrap();
        assert!(m[0].outcomes.iter().all(|o| o.answer_nodes == 0));
        assert_eq!(m[0].solve_rate, 0.0);
    }

    #[test]
    fn oracle_scores_off_path_negative() {
        let sc = shape(3, 4, 0.0).instance(9);
        let oracle = build_scenario(&sc).oracle;
        let wrong = (sc.correct_action_index[0] + 1) % 3;
        let conv = vec![Message::user("q"), Message::assistant(choice_turn(0, wrong))];
        assert_eq!(oracle.score(&conv).unwrap(), ORACLE_OFF_PATH);
        let right = vec![Message::user("q"), Message::assistant(choice_turn(0, sc.correct_action_index[0]))];
        assert_eq!(oracle.score(&right).unwrap(), ORACLE_ON_PATH);
        assert_eq!(oracle.score(&[Message::user("q")]).unwrap(), ORACLE_ON_PATH);
    }

    #[test]
    fn answer_only_on_path_at_final_level() {
        let sc = shape(2, 3, 0.0).instance(0);
        let mut conv = vec![Message::user("q")];
        for l in 0..2 {
            conv.push(Message::assistant(choice_turn(l, sc.correct_action_index[l])));
        }
        conv.push(Message::assistant(render_answer_turn("x", &sc.answer_label)));
        let st = sc.locate(&conv);
        assert!(st.on_path && st.answered);
        let early = vec![Message::user("q"), Message::assistant(render_answer_turn("x", &sc.answer_label))];
        assert!(!sc.locate(&early).on_path);
    }

    #[test]
    fn zero_budget_solves_nothing() {
        let m = run_experiment(&shape(3, 2, 0.0), &StrategyConfig::ablation_grid(1.25), &[0, 1], 0).unwrap();
        assert!(m.iter().all(|s| s.solve_rate == 0.0 && s.mean_iterations_to_solve.is_none()));
    }

    #[test]
    fn noiseless_greedy_oracle_solves_within_depth_plus_one() {
        for depth in 1..=6 {
            let m = run_experiment(&shape(3, depth, 0.0), &[greedy_oracle()], &(0..10).collect::<Vec<_>>(), 40).unwrap();
            for o in &m[0].outcomes {
                assert!(o.first_correct_iteration.is_some_and(|f| f as usize <= depth + 1), "{o:?}");
            }
        }
    }

    #[test]
    fn results_are_deterministic() {
        let grid = StrategyConfig::ablation_grid(1.25);
        let seeds: Vec<u64> = (0..6).collect();
        let a = run_experiment(&shape(3, 4, 0.3), &grid, &seeds, 25).unwrap();
        let b = run_experiment(&shape(3, 4, 0.3), &grid, &seeds, 25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn curve_is_cumulative() {
        let c = accuracy_vs_iterations(&shape(3, 3, 0.3), &greedy_oracle(), &(0..8).collect::<Vec<_>>(), &[2, 5, 10, 20]).unwrap();
        assert!(c.windows(2).all(|w| w[0] <= w[1]));
        assert!(accuracy_vs_iterations(&shape(3, 3, 0.3), &greedy_oracle(), &[0], &[5, 2]).is_err());
    }

    #[test]
    fn trivially_solvable_curve_hits_one_at_depth() {
        let c = accuracy_vs_iterations(&shape(3, 2, 0.0), &greedy_oracle(), &[0, 1, 2], &[1, 2, 4]).unwrap();
        assert_eq!(c[1], 1.0);
        assert_eq!(c[2], 1.0);
    }

    #[test]
    fn noisy_backend_stays_in_range() {
        let sc = shape(3, 3, 0.3).instance(1);
        let est = OracleValue { scenario: sc, sigma: 2.0 };
        for i in 0..50 {
            let v = est.score(&[Message::user(format!("q{i}"))]).unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn sim_tree_steps_like_any_other() {
        let sc = shape(3, 2, 0.0).instance(3);
        let built = build_scenario(&sc);
        let deps = SearchDeps {
            policy: &built.policy,
            executor: &built.executor,
            value: Some(&built.oracle),
            grader: None,
            session: SessionSpec::default(),
            tokens: &HeuristicTokens,
        };
        let mut cfg = SearchConfig::inference();
        cfg.c_puct = 0.0;
        let mut t = SearchTree::new("s", vec![Message::user("q")], cfg, 3);
        let r = run_iteration(&mut t, &deps).unwrap();
        assert_eq!(r.created.len(), 3);
        assert!(r.backprops.iter().all(|&(_, v)| v == ORACLE_ON_PATH));
    }

    #[test]
    fn table_and_jsonl_render() {
        let m = run_experiment(&shape(2, 2, 0.0), &StrategyConfig::ablation_grid(1.25), &[0], 5).unwrap();
        let table = metrics_table(&m);
        assert_eq!(table.lines().count(), 5);
        assert!(table.starts_with("strategy"));
        let jsonl = metrics_jsonl(&m);
        assert_eq!(jsonl.lines().count(), 4);
        assert!(!jsonl.contains("outcomes"));
    }
}

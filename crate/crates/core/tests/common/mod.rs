#![allow(dead_code)]

use nbmcts_core::gateway::{GatewayError, HeuristicTokens, Message, PolicyCandidate, SamplingParams, ScriptedPolicy, ZeroValue};
use nbmcts_core::protocol::{render_task_prompt, PromptTemplate};
use nbmcts_core::sandbox::{ExecutionResult, MockExecutor, SandboxError};
use nbmcts_core::search::{continue_search, IterationReport, StopReason};
use nbmcts_core::util::stable_hash64;
use nbmcts_core::{AnswerLabels, Grader, Phase, SearchConfig, SearchDeps, SearchTree, SessionSpec, TaskSpec, Tolerance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Policy that draws a random mix of code, answers and junk from the
/// per-expansion sampling seed.
pub fn random_policy(msgs: &[Message], params: &SamplingParams) -> Result<Vec<PolicyCandidate>, GatewayError> {
    let depth = msgs.iter().filter(|m| m.role == nbmcts_core::Role::Assistant).count();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.unwrap_or(0));
    Ok((0..params.n)
        .map(|i| {
            let roll: f64 = rng.random();
            let text = if roll < 0.5 {
                let v: u32 = rng.random_range(0..1000);
                let cell = if rng.random_bool(0.3) { format!("fail({v})") } else { format!("v{depth}_{i} = {v}") };
                format!("Thought: step {depth}\nAction: ```python\n{cell}\n```")
            } else if roll < 0.85 {
                format!("Thought: done\nFormatted answer: @x[{}]", rng.random_range(0..3))
            } else {
                "I am not sure what to do.".to_string()
            };
            PolicyCandidate { text, mean_logprob: None }
        })
        .collect())
}

pub fn random_executor(_: &SessionSpec, cells: &[String]) -> Result<Vec<ExecutionResult>, SandboxError> {
    let mut out = Vec::new();
    for c in cells {
        if c.starts_with("fail") {
            out.push(ExecutionResult::error("RuntimeError", "Traceback: boom"));
            break;
        }
        out.push(ExecutionResult::ok(format!("{}\n", c.len())));
    }
    Ok(out)
}

pub fn hashed_value(msgs: &[Message]) -> Result<f64, GatewayError> {
    let h = stable_hash64(msgs.iter().map(|m| m.content.as_bytes()));
    Ok((h % 2001) as f64 / 1000.0 - 1.0)
}

pub fn random_config(rng: &mut ChaCha8Rng) -> SearchConfig {
    let phase = if rng.random_bool(0.5) { Phase::Collection } else { Phase::Inference };
    let mut c = SearchConfig::for_phase(phase);
    c.k_expansions = rng.random_range(1..=4);
    c.max_iterations = rng.random_range(5..=30);
    c.max_depth = rng.random_range(2..=6);
    c.c_puct = [0.0, 0.5, 1.25, 2.0][rng.random_range(0..4)];
    c.parallel_exec = false;
    c
}

/// A finished random search plus every iteration report it produced.
pub fn random_search(seed: u64) -> (SearchTree, Vec<IterationReport>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = random_config(&mut rng);
    let grader = Grader::new(AnswerLabels::parse("@x[1]"), Tolerance::default());
    let deps = SearchDeps {
        policy: &random_policy,
        executor: &random_executor,
        value: Some(&hashed_value),
        grader: Some(&grader),
        session: SessionSpec::default(),
        tokens: &HeuristicTokens,
    };
    let mut tree = SearchTree::new(format!("rand-{seed}"), vec![Message::user("find x")], config, seed);
    let mut reports = Vec::new();
    continue_search(&mut tree, &deps, None, |_, r| reports.push(r.clone())).unwrap();
    (tree, reports)
}

pub const GOLDEN_SEED: u64 = 20240611;
pub const GOLDEN_ITERATIONS: u32 = 12;

pub fn golden_task() -> TaskSpec {
    let mut t = TaskSpec::new("golden-1", "What is the mean of column `score` in scores.csv?");
    t.constraints = "Round to two decimal places.".into();
    t.output_format = "@mean[value]".into();
    t.file_names = vec!["scores.csv".into()];
    t.label = Some("@mean[2.50]".into());
    t
}

pub fn golden_policy() -> ScriptedPolicy {
    let turns: Vec<Vec<&str>> = vec![
        vec![
            "Thought: Load the file first.\nAction: ```python\nimport pandas as pd\ndf = pd.read_csv('scores.csv')\nprint(df.shape)\n```",
            "Thought: Try the column directly.\nAction: ```python\nprint(df['score'].mean())\n```",
            "Thought: I can guess.\nFormatted answer: @mean[3.1]",
        ],
        vec![
            "Thought: Compute the mean.\nAction: ```python\nprint(round(df['score'].mean(), 2))\n```",
            "Thought: The mean is known.\nFormatted answer: @mean[2.5]",
            "no idea",
        ],
        vec![
            "Thought: The output shows the mean.\nFormatted answer: @mean[2.50]",
            "Thought: Double check.\nAction: ```python\nprint(df['score'].describe())\n```",
            "Thought: Maybe it is larger.\nFormatted answer: @mean[3.1]",
        ],
        vec!["Thought: Settled.\nFormatted answer: @mean[2.5]"],
    ];
    ScriptedPolicy::by_turn(turns.into_iter().map(|t| t.into_iter().map(String::from).collect()).collect())
}

pub fn golden_executor() -> MockExecutor {
    MockExecutor::default()
        .with_default(ExecutionResult::ok("done\n"))
        .with_cell(
            "import pandas as pd\ndf = pd.read_csv('scores.csv')\nprint(df.shape)",
            ExecutionResult::ok("(4, 2)\n"),
        )
        .with_sequence(
            &["print(df['score'].mean())"],
            ExecutionResult::error("NameError", "NameError: name 'df' is not defined"),
        )
        .with_cell("print(round(df['score'].mean(), 2))", ExecutionResult::ok("2.5\n"))
}

/// Runs the golden scenario and returns the snapshot document and the
/// final majority-vote answer.
pub fn golden_run() -> (String, Option<String>, StopReason) {
    let task = golden_task();
    let policy = golden_policy();
    let executor = golden_executor();
    let grader = Grader::new(task.expected_labels().unwrap(), Tolerance::default());
    let deps = SearchDeps {
        policy: &policy,
        executor: &executor,
        value: Some(&ZeroValue),
        grader: Some(&grader),
        session: SessionSpec::default(),
        tokens: &HeuristicTokens,
    };
    let mut config = SearchConfig::inference();
    config.max_iterations = GOLDEN_ITERATIONS;
    config.parallel_exec = false;
    let result = nbmcts_core::search::run_search(&task, config, GOLDEN_SEED, &PromptTemplate::default(), &deps).unwrap();
    let doc = nbmcts_core::persist::snapshot_tree(&result.tree);
    (doc, result.final_labels.map(|l| l.to_label_string()), result.stop_reason)
}

pub fn golden_prompt() -> Vec<Message> {
    render_task_prompt(&golden_task(), &PromptTemplate::default())
}

pub fn golden_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

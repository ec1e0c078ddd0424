use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nbmcts_core::evaluator::{grade_answer_with, ListOrder};
use nbmcts_core::gateway::{policy_from_url, value_from_url, HeuristicTokens};
use nbmcts_core::orchestrator::{self, Endpoints, RunManifest, RunOptions, Services, TaskStatus};
use nbmcts_core::protocol::PromptTemplate;
use nbmcts_core::sandbox::{executor_from_url, BoundedExecutor, DEFAULT_MAX_CONCURRENT_JOBS};
use nbmcts_core::sim::{self, ExperimentSpec, ScenarioShape};
use nbmcts_core::trajectory::{self, ExtractOptions};
use nbmcts_core::{persist, AnswerLabels, Phase, SearchTree, Tolerance, ValueEstimator};
use serde::Deserialize;

use crate::settings::{resolve, FileConfig, RunFlags};
use crate::{ExtractArgs, GradeArgs, ResumeArgs, SimulateArgs};

fn template(path: Option<&Path>) -> Result<PromptTemplate> {
    match path {
        Some(p) => PromptTemplate::from_file(p).with_context(|| format!("reading template {}", p.display())),
        None => Ok(PromptTemplate::default()),
    }
}

struct Backends {
    policy: Box<dyn nbmcts_core::Policy>,
    value: Option<Box<dyn ValueEstimator>>,
    executor: BoundedExecutor,
}

impl Backends {
    fn connect(endpoints: &Endpoints, model: &str, policy_key: Option<String>, value_key: Option<String>, max_exec: usize) -> Result<Self> {
        let policy = policy_from_url(&endpoints.policy, model, policy_key)?;
        let value = endpoints.value.as_deref().map(|u| value_from_url(u, value_key)).transpose()?;
        let executor = BoundedExecutor::new(executor_from_url(&endpoints.executor)?, max_exec);
        Ok(Self { policy, value, executor })
    }

    fn services(&self) -> Services<'_> {
        Services {
            policy: self.policy.as_ref(),
            executor: &self.executor,
            value: self.value.as_deref(),
            tokens: &HeuristicTokens,
        }
    }
}

fn summarize(m: &RunManifest) {
    for t in &m.tasks {
        let verdict = match t.correct {
            Some(true) => " correct",
            Some(false) => " incorrect",
            None => "",
        };
        match t.status {
            TaskStatus::Done => println!(
                "{}\tdone\titers={}\tanswers={}\tfinal={}{verdict}",
                t.task.task_id,
                t.iterations_done,
                t.answer_nodes,
                t.final_answer.as_deref().unwrap_or("-")
            ),
            status => println!(
                "{}\t{:?}\t{}",
                t.task.task_id,
                status,
                t.error.as_deref().unwrap_or("")
            ),
        }
    }
    let graded: Vec<bool> = m.tasks.iter().filter_map(|t| t.correct).collect();
    println!(
        "done {} / failed {} / total {}",
        m.count(TaskStatus::Done),
        m.count(TaskStatus::Failed),
        m.tasks.len()
    );
    if !graded.is_empty() && m.config.phase == Phase::Inference {
        let k = graded.iter().filter(|&&c| c).count();
        println!("Accuracy by Questions: {:.4} ({k}/{})", k as f64 / graded.len() as f64, graded.len());
    }
}

pub fn run(default_phase: Phase, flags: &RunFlags) -> Result<()> {
    let file = match &flags.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let r = resolve(default_phase, flags, &file)?;
    let tasks = orchestrator::load_tasks(&flags.tasks)?;
    if r.config.phase == Phase::Collection {
        if let Some(t) = tasks.iter().find(|t| t.label.is_none()) {
            bail!("collection runs need labels; task {:?} has none", t.task_id);
        }
    }
    let endpoints = Endpoints { policy: r.policy_url.clone(), value: r.value_url.clone(), executor: r.executor_url.clone() };
    let backends = Backends::connect(&endpoints, &r.policy_model, flags.policy_api_key.clone(), flags.value_api_key.clone(), r.max_concurrent_exec)?;
    let mut opts = RunOptions::new(&flags.out);
    opts.master_seed = r.seed;
    opts.parallel_trees = r.parallel_trees;
    opts.tolerance = r.tolerance;
    opts.session = r.session.clone();
    opts.endpoints = endpoints;
    opts.template = template(r.template.as_deref())?;
    opts.checkpoint_every = r.checkpoint_every;
    let manifest = orchestrator::run_batch(&tasks, &r.config, &opts, &backends.services())?;
    summarize(&manifest);
    Ok(())
}

pub fn resume(a: &ResumeArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.out)?;
    let mut endpoints = manifest.endpoints.clone();
    if let Some(u) = &a.policy_url {
        endpoints.policy = u.clone();
    }
    if a.value_url.is_some() {
        endpoints.value = a.value_url.clone();
    }
    if let Some(u) = &a.executor_url {
        endpoints.executor = u.clone();
    }
    let backends = Backends::connect(
        &endpoints,
        a.policy_model.as_deref().unwrap_or("policy"),
        a.policy_api_key.clone(),
        a.value_api_key.clone(),
        a.max_concurrent_exec.unwrap_or(DEFAULT_MAX_CONCURRENT_JOBS).max(1),
    )?;
    let template = template(a.template.as_deref())?;
    let manifest = orchestrator::resume_run(&a.out, &template, a.checkpoint_every, &backends.services())?;
    summarize(&manifest);
    Ok(())
}

fn collect_trees(inputs: &[PathBuf]) -> Result<Vec<SearchTree>> {
    let mut trees = Vec::new();
    for input in inputs {
        if input.join(orchestrator::MANIFEST_FILE).exists() {
            trees.extend(orchestrator::load_run_trees(input)?);
        } else if input.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect();
            files.sort();
            for f in files {
                trees.push(persist::read_tree(&f).with_context(|| format!("loading {}", f.display()))?);
            }
        } else {
            trees.push(persist::read_tree(input).with_context(|| format!("loading {}", input.display()))?);
        }
    }
    Ok(trees)
}

pub fn extract(a: &ExtractArgs) -> Result<()> {
    let trees = collect_trees(&a.trees)?;
    let opts = ExtractOptions {
        max_correct: a.max_correct,
        max_incorrect: a.max_incorrect,
        seed: a.seed,
        input_budget: a.input_budget,
    };
    let mut records = Vec::new();
    let mut dropped = 0;
    for tree in &trees {
        if tree.config.phase != Phase::Collection {
            tracing::warn!(task = %tree.task_id, "tree was not built in the collection phase; labels may be meaningless");
        }
        let ex = trajectory::extract_tree(tree, &opts, &HeuristicTokens)?;
        dropped += ex.dropped_over_budget;
        records.extend(ex.records);
    }
    let n = trajectory::write_dataset(&records, &a.out)?;
    println!("trees {} / records {n} / dropped over budget {dropped}", trees.len());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct GradeRow {
    task_id: String,
    label: String,
    candidate: String,
}

pub fn grade(a: &GradeArgs) -> Result<()> {
    let d = Tolerance::default();
    let tol = Tolerance::new(a.tolerance_abs.unwrap_or(d.abs_tol), a.tolerance_rel.unwrap_or(d.rel_tol));
    let order = if a.unordered_lists { ListOrder::Unordered } else { ListOrder::Ordered };
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: GradeRow = serde_json::from_str(line).with_context(|| format!("{}:{}", a.input.display(), i + 1))?;
        let expected = AnswerLabels::parse(&row.label);
        if expected.is_empty() {
            bail!("{}:{}: label has no @name[value] pair", a.input.display(), i + 1);
        }
        let ok = grade_answer_with(&expected, &AnswerLabels::parse(&row.candidate), &tol, order);
        total += 1;
        correct += usize::from(ok);
        println!("{}\t{}", row.task_id, if ok { "correct" } else { "incorrect" });
    }
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    println!("Accuracy by Questions: {acc:.4} ({correct}/{total})");
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<ExperimentSpec>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentSpec {
            scenario: ScenarioShape {
                branching: a.branching,
                depth: a.depth,
                policy_noise: a.noise,
                answer_label: "@answer[42]".into(),
                correct_action_index: None,
            },
            strategies: sim::StrategyConfig::ablation_grid(1.25),
            seeds: a.seeds,
            budget: a.budget,
            checkpoints: a.checkpoints.clone(),
        },
    };
    if spec.strategies.is_empty() || spec.seeds == 0 {
        bail!("an experiment needs at least one strategy and one seed");
    }
    let mut checkpoints = if spec.checkpoints.is_empty() { a.checkpoints.clone() } else { spec.checkpoints.clone() };
    if checkpoints.windows(2).any(|w| w[0] > w[1]) {
        bail!("checkpoints must be ascending");
    }
    checkpoints.retain(|&c| c <= spec.budget);
    let metrics = sim::run_experiment(&spec.scenario, &spec.strategies, &spec.seed_list(), spec.budget)?;
    let table = sim::metrics_table(&metrics);
    print!("{table}");
    let curves = sim::curves(&metrics, &checkpoints);
    if !checkpoints.is_empty() {
        println!("checkpoints {checkpoints:?}");
        for (name, c) in &curves {
            let cells: Vec<String> = c.iter().map(|v| format!("{v:.2}")).collect();
            println!("{name}\t{}", cells.join(" "));
        }
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("metrics.jsonl"), sim::metrics_jsonl(&metrics))?;
        std::fs::write(out.join("table.txt"), &table)?;
        let doc = serde_json::json!({ "checkpoints": checkpoints, "curves": curves });
        std::fs::write(out.join("curves.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    }
    Ok(())
}

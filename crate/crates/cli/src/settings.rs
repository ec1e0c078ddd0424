//! Run settings: phase defaults, then an optional config file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use nbmcts_core::search::FinalSelection;
use nbmcts_core::{Phase, SearchConfig, SessionSpec, Tolerance};
use serde::Deserialize;

/// Keys accepted in a `--config` file (TOML, or JSON when the file ends in
/// `.json`). Names match the long flags with `-` replaced by `_`.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub phase: Option<Phase>,
    pub iters: Option<u32>,
    pub depth: Option<usize>,
    pub k: Option<usize>,
    pub c_puct: Option<f64>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub final_selection: Option<FinalSelection>,
    pub early_stop_agreement: Option<usize>,
    pub policy_url: Option<String>,
    pub policy_model: Option<String>,
    pub value_url: Option<String>,
    pub executor_url: Option<String>,
    pub parallel_trees: Option<usize>,
    pub max_concurrent_exec: Option<usize>,
    pub exec_timeout_secs: Option<f64>,
    pub seed: Option<u64>,
    pub tolerance_abs: Option<f64>,
    pub tolerance_rel: Option<f64>,
    pub checkpoint_every: Option<u32>,
    pub template: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        }
    }
}

/// Flags shared by `search` and `collect`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// Task file, one JSON object per line.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Output directory for the manifest and tree snapshots.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML or JSON settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_phase)]
    pub phase: Option<Phase>,
    /// Iteration budget per tree.
    #[arg(long)]
    pub iters: Option<u32>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Candidates sampled per expansion.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub c_puct: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Chat-completions base URL, `mock:script=<file>` or `mock:answer=<text>`.
    #[arg(long)]
    pub policy_url: Option<String>,
    #[arg(long)]
    pub policy_model: Option<String>,
    /// Value service base URL, `mock:zero` or `mock:const=<v>`.
    #[arg(long)]
    pub value_url: Option<String>,
    /// `local`, `local:<python>`, `mock:`, `mock:script=<file>` or an http(s) URL.
    #[arg(long)]
    pub executor_url: Option<String>,
    #[arg(long)]
    pub parallel_trees: Option<usize>,
    #[arg(long)]
    pub max_concurrent_exec: Option<usize>,
    /// Master seed; per-task seeds are derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tolerance_abs: Option<f64>,
    #[arg(long)]
    pub tolerance_rel: Option<f64>,
    /// Write each tree every N iterations while it runs.
    #[arg(long)]
    pub checkpoint_every: Option<u32>,
    /// Prompt template file replacing the built-in one.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long, env = "POLICY_API_KEY", hide_env_values = true)]
    pub policy_api_key: Option<String>,
    #[arg(long, env = "VALUE_API_KEY", hide_env_values = true)]
    pub value_api_key: Option<String>,
}

pub fn parse_phase(s: &str) -> Result<Phase, String> {
    match s {
        "collection" | "collect" => Ok(Phase::Collection),
        "inference" | "search" => Ok(Phase::Inference),
        _ => Err(format!("unknown phase {s:?} (expected collection or inference)")),
    }
}

/// Everything a batch run needs, resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: SearchConfig,
    pub tolerance: Tolerance,
    pub session: SessionSpec,
    pub policy_url: String,
    pub policy_model: String,
    pub value_url: Option<String>,
    pub executor_url: String,
    pub parallel_trees: usize,
    pub max_concurrent_exec: usize,
    pub seed: u64,
    pub checkpoint_every: Option<u32>,
    pub template: Option<PathBuf>,
}

pub fn resolve(default_phase: Phase, flags: &RunFlags, file: &FileConfig) -> Result<Resolved> {
    let phase = flags.phase.or(file.phase).unwrap_or(default_phase);
    let mut config = SearchConfig::for_phase(phase);
    macro_rules! pick {
        ($field:ident) => {
            flags.$field.clone().or(file.$field.clone())
        };
    }
    if let Some(v) = pick!(iters) {
        config.max_iterations = v;
    }
    if let Some(v) = pick!(depth) {
        config.max_depth = v;
    }
    if let Some(v) = pick!(k) {
        config.k_expansions = v;
    }
    if let Some(v) = pick!(c_puct) {
        config.c_puct = v;
    }
    if let Some(v) = pick!(temperature) {
        config.sampling.temperature = v;
    }
    if let Some(v) = pick!(top_p) {
        config.sampling.top_p = v;
    }
    if let Some(v) = file.max_output_tokens {
        config.sampling.max_output_tokens = v;
    }
    if let Some(v) = file.final_selection {
        config.final_selection = v;
    }
    if file.early_stop_agreement.is_some() {
        config.early_stop_agreement = file.early_stop_agreement;
    }
    config.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

    let defaults = Tolerance::default();
    let tolerance = Tolerance::new(
        pick!(tolerance_abs).unwrap_or(defaults.abs_tol),
        pick!(tolerance_rel).unwrap_or(defaults.rel_tol),
    );
    if tolerance.abs_tol < 0.0 || tolerance.rel_tol < 0.0 {
        bail!("tolerances must be non-negative");
    }
    let mut session = SessionSpec::default();
    if let Some(t) = file.exec_timeout_secs {
        session.timeout_secs = t;
    }
    let Some(policy_url) = pick!(policy_url) else {
        bail!("no policy endpoint: pass --policy-url or set policy_url in the config file");
    };
    Ok(Resolved {
        config,
        tolerance,
        session,
        policy_url,
        policy_model: pick!(policy_model).unwrap_or_else(|| "policy".into()),
        value_url: pick!(value_url),
        executor_url: pick!(executor_url).unwrap_or_else(|| "local".into()),
        parallel_trees: pick!(parallel_trees).unwrap_or(1).max(1),
        max_concurrent_exec: pick!(max_concurrent_exec).unwrap_or(nbmcts_core::sandbox::DEFAULT_MAX_CONCURRENT_JOBS).max(1),
        seed: pick!(seed).unwrap_or(0),
        checkpoint_every: pick!(checkpoint_every),
        template: pick!(template),
    })
}

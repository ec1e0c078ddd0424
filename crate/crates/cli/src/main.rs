mod commands;
mod settings;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use settings::RunFlags;

#[derive(Debug, Parser)]
#[command(name = "nbmcts", version, about = "Value-guided tree search for code-executing agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inference run: value-guided search, final answer by vote.
    Search(RunFlags),
    /// Collection run: exploratory search graded against task labels.
    Collect(RunFlags),
    /// Continue an interrupted run directory.
    Resume(ResumeArgs),
    /// Turn collection trees into value-model training records.
    Extract(ExtractArgs),
    /// Grade candidate answers against labels.
    Grade(GradeArgs),
    /// Run synthetic search experiments.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Override the endpoints recorded in the manifest.
    #[arg(long)]
    pub policy_url: Option<String>,
    #[arg(long)]
    pub policy_model: Option<String>,
    #[arg(long)]
    pub value_url: Option<String>,
    #[arg(long)]
    pub executor_url: Option<String>,
    #[arg(long)]
    pub max_concurrent_exec: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u32>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long, env = "POLICY_API_KEY", hide_env_values = true)]
    pub policy_api_key: Option<String>,
    #[arg(long, env = "VALUE_API_KEY", hide_env_values = true)]
    pub value_api_key: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Run directories (with a manifest), snapshot directories or snapshot files.
    #[arg(long = "trees", required = true, num_args = 1..)]
    pub trees: Vec<PathBuf>,
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_correct: usize,
    #[arg(long, default_value_t = 4)]
    pub max_incorrect: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Records whose conversation exceeds this many estimated tokens are dropped.
    #[arg(long, default_value_t = nbmcts_core::gateway::POLICY_INPUT_BUDGET)]
    pub input_budget: usize,
}

#[derive(Debug, Args)]
pub struct GradeArgs {
    /// JSONL rows of `{"task_id", "label", "candidate"}`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub tolerance_abs: Option<f64>,
    #[arg(long)]
    pub tolerance_rel: Option<f64>,
    /// Compare lists as multisets.
    #[arg(long)]
    pub unordered_lists: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment spec (JSON). Without it the flags below describe the run.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub branching: usize,
    #[arg(long, default_value_t = 6)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Number of seeds, `0..N`.
    #[arg(long, default_value_t = 50)]
    pub seeds: u64,
    #[arg(long, default_value_t = 40)]
    pub budget: u32,
    /// Comma-separated iteration checkpoints for accuracy curves.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Vec<u32>,
    /// Directory for metrics.jsonl, table.txt and curves.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Search(f) => commands::run(nbmcts_core::Phase::Inference, &f),
        Command::Collect(f) => commands::run(nbmcts_core::Phase::Collection, &f),
        Command::Resume(a) => commands::resume(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Grade(a) => commands::grade(&a),
        Command::Simulate(a) => commands::simulate(&a),
    }
}

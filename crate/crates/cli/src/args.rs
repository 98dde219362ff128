use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use apl_core::acquisition::Strategy;
use apl_core::analysis::Scoring;
use apl_core::engine::Mode;
use apl_core::oracle::TemplateId;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8787";

/// Parses a value through its serde name, so CLI spellings match the JSON ones.
fn serde_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "apl", version, about = "Active preference learning for DPO fine-tuning")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic valence corpus, prompt pool and evaluation prompts.
    GenData(GenDataArgs),
    /// Train a base policy on the corpus.
    Pretrain(PretrainArgs),
    /// Run one active-learning loop.
    Run(RunCommand),
    /// Win-rate of a checkpoint against a baseline.
    Eval(EvalArgs),
    /// Oracle self-consistency under slot randomization.
    Consistency(ConsistencyArgs),
    /// Aggregate run directories into tables, histograms and figures.
    Analyze(AnalyzeArgs),
    /// Serve the labelling API, optionally attached to a run.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    Valence,
    Llm,
    Human,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    /// Data directory from `gen-data`; the default synthetic task if omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

/// Remote judge settings; they override the `judge` block of a config file.
#[derive(Debug, Clone, Default, Args)]
pub struct JudgeArgs {
    #[arg(long)]
    pub judge_url: Option<String>,
    #[arg(long)]
    pub judge_model: Option<String>,
    #[arg(long, value_parser = serde_name::<TemplateId>)]
    pub judge_template: Option<TemplateId>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = serde_name::<Strategy>)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = serde_name::<Mode>)]
    pub mode: Option<Mode>,
    /// Labelling oracle [default: valence for `run`, human for `serve`].
    #[arg(long, value_enum)]
    pub oracle: Option<OracleKind>,
    /// Judge for win-rate evaluation; human is not accepted here.
    #[arg(long, value_enum, default_value_t = OracleKind::Valence)]
    pub eval_oracle: OracleKind,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Base policy checkpoint; pretrained on the spot if omitted.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Continue the run in `--out` from its latest checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub judge: JudgeArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ListenArgs {
    #[arg(long, default_value = DEFAULT_ADDR)]
    pub addr: SocketAddr,
    /// Permit binding a non-loopback address.
    #[arg(long)]
    pub allow_external: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunCommand {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Where the labelling API listens in human mode.
    #[command(flatten)]
    pub listen: ListenArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Run directory; without it the API is served with no run attached.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub listen: ListenArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Baseline policy; the default is the base policy.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OracleKind::Valence)]
    pub oracle: OracleKind,
    #[arg(long, default_value_t = 512)]
    pub prompts: usize,
    #[arg(long, default_value_t = 0.25)]
    pub temperature: f64,
    #[arg(long, default_value_t = 8)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0.05)]
    pub oracle_temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub judge: JudgeArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ConsistencyArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OracleKind::Valence)]
    pub oracle: OracleKind,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 8)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0.05)]
    pub oracle_temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub judge: JudgeArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = serde_name::<Scoring>, default_value = "at-acquisition")]
    pub scoring: Scoring,
    /// Earliest acquisition step entering the histograms.
    #[arg(long, default_value_t = 2)]
    pub min_step: usize,
    /// Dataset sizes for the table; every size present if omitted.
    #[arg(long, value_delimiter = ',')]
    pub waypoints: Vec<usize>,
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtpref::rltrain::Baseline;
use mtpref::scoring::MetricChoice;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "mtpref", version, about = "Quality-model integration for a toy translation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Serialize)]
pub struct Global {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Scoring service base URL for remote:<metric>.
    #[arg(long, global = true, env = "MTPREF_SCORER_URL")]
    pub scorer_url: Option<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus with its gold oracle and noise ledger.
    Gen(GenArgs),
    /// Score, select and sweep training subsets.
    #[command(subcommand)]
    Filter(FilterCommand),
    /// Train a policy.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Produce translations or candidate lists.
    #[command(subcommand)]
    Decode(DecodeCommand),
    /// Pick one candidate per source.
    #[command(subcommand)]
    Rerank(RerankCommand),
    /// Run stages end to end on a generated corpus.
    Pipeline(PipelineArgs),
    /// Score outputs against references.
    Eval(EvalArgs),
    /// Wall-clock table of training and inference methods.
    Bench(BenchArgs),
}

pub fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn metric(s: &str) -> Result<MetricChoice, String> {
    s.parse().map_err(|e: mtpref::Error| e.to_string())
}

#[derive(Args, Debug, Serialize)]
pub struct TaskArgs {
    #[arg(long, default_value_t = 24)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0.1, value_parser = unit_interval)]
    pub swap: f64,
    #[arg(long, default_value_t = 0.0, value_parser = unit_interval)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    pub size: usize,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Also write train/dev/test splits; held-out splits carry gold references.
    #[arg(long, value_name = "TRAIN,DEV", value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum FilterCommand {
    /// Score every pair with a reference-free metric.
    Score(FilterScoreArgs),
    /// Keep the best pairs by count, fraction or threshold.
    Select(FilterSelectArgs),
    /// Train on several subset sizes and keep the best one.
    Sweep(FilterSweepArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct FilterScoreArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "mock-qe", value_parser = metric)]
    pub metric: MetricChoice,
    /// Gold oracle, needed by mock-qe.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[command(group = clap::ArgGroup::new("how").required(true).args(["top_k", "top_frac", "threshold"]))]
pub struct FilterSelectArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, value_parser = unit_interval)]
    pub top_frac: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FilterSweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub task: PathBuf,
    /// Subset sizes, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[command(flatten)]
    pub mle: MleArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum TrainCommand {
    /// Maximum-likelihood training.
    Mle(TrainMleArgs),
    /// PPO fine-tuning against a metric reward.
    Rl(TrainRlArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct MleArgs {
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainMleArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Task description written by `gen`; fixes the vocabulary.
    #[arg(long, required_unless_present = "init")]
    pub task: Option<PathBuf>,
    /// Start from a checkpoint instead of random weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Train on the first N pairs only.
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[command(flatten)]
    pub mle: MleArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
pub enum BaselineArg {
    None,
    BatchMean,
    PerPosition,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::None => Baseline::None,
            BaselineArg::BatchMean => Baseline::BatchMean,
            BaselineArg::PerPosition => Baseline::PerPosition,
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct PpoArgs {
    #[arg(long, default_value_t = 2e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.99)]
    pub gamma: f64,
    /// Total trajectories for the run.
    #[arg(long, default_value_t = 10_000)]
    pub trajectory_limit: usize,
    #[arg(long, default_value_t = 5)]
    pub rollout_beam: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 4)]
    pub ppo_epochs: usize,
    #[arg(long, default_value_t = 0.2)]
    pub clip: f64,
    #[arg(long, default_value_t = 0.0)]
    pub kl_coef: f64,
    #[arg(long, value_enum, default_value_t = BaselineArg::BatchMean)]
    pub baseline: BaselineArg,
    #[arg(long, default_value_t = 64)]
    pub rollouts_per_iter: usize,
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainRlArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub init: PathBuf,
    /// bleu, chrf, mock-qe or remote:<metric>.
    #[arg(long, default_value = "chrf", value_parser = metric)]
    pub reward: MetricChoice,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[command(flatten)]
    pub ppo: PpoArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum DecodeCommand {
    /// Beam search; one line per source, or the beam as candidates.
    Beam(DecodeBeamArgs),
    /// Truncated ancestral sampling into candidate lists.
    Sample(DecodeSampleArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct DecodeBeamArgs {
    #[arg(long)]
    pub policy: PathBuf,
    /// Corpus JSONL; only `src` is read.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Write the whole beam as candidate JSONL instead of plain text.
    #[arg(long)]
    pub candidates: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct DecodeSampleArgs {
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, short = 'n', default_value_t = 100)]
    pub num: usize,
    #[arg(long, default_value_t = 300)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.6)]
    pub top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum RerankCommand {
    /// Highest reference-free score wins.
    Nbest(RerankNbestArgs),
    /// Highest expected utility against the other candidates wins.
    Mbr(RerankMbrArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct RerankNbestArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long, default_value = "mock-qe", value_parser = metric)]
    pub metric: MetricChoice,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct RerankMbrArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long, default_value = "chrf", value_parser = metric)]
    pub utility: MetricChoice,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Reuse u(a, b) for u(b, a) when the utility is symmetric.
    #[arg(long)]
    pub symmetric_cache: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PipelineArgs {
    /// Comma-separated: filter, mle, rl, nrr, mbr, eval (in that order).
    #[arg(long)]
    pub stages: String,
    /// JSON pipeline configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_parser = unit_interval)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = unit_interval)]
    pub keep: Option<f64>,
    #[arg(long)]
    pub mle_epochs: Option<usize>,
    #[arg(long)]
    pub mle_max_pairs: Option<usize>,
    #[arg(long)]
    pub rl_lr: Option<f64>,
    #[arg(long)]
    pub trajectory_limit: Option<usize>,
    #[arg(long, value_parser = metric)]
    pub reward: Option<MetricChoice>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Corpus JSONL with the references.
    #[arg(long)]
    pub refs: PathBuf,
    /// Plain text (one line per source) or selection JSONL.
    #[arg(long)]
    pub hyps: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Also write the scores as JSON.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub policy: PathBuf,
    /// Directory with train.jsonl, dev.jsonl, test.jsonl and gold.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub candidates: usize,
    #[arg(long, default_value_t = 2)]
    pub mle_epochs: usize,
    #[arg(long, default_value_t = 640)]
    pub trajectory_limit: usize,
    #[arg(long)]
    pub skip_training: bool,
    #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
    pub format: TableFormat,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

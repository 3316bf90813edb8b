mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Converts conversational feedback into natural responses and measures the
/// effect on retrieval chatbots.
#[derive(Debug, Parser)]
#[command(name = "f2r", version)]
pub struct Cli {
    /// Directory searched for relative input paths that do not exist locally.
    #[arg(long, env = "F2R_DATA_DIR", global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random component of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Heuristic,
    F2r,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StyleArg {
    Natural,
    Feedback,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a dialogue corpus, or with --feedback build balanced style-corpus splits.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Dialogue corpus.
        #[arg(long = "in")]
        input: PathBuf,
        /// Feedback corpus.
        #[arg(long)]
        feedback: Option<PathBuf>,
        /// Style given to records without one when no feedback file is passed.
        #[arg(long, value_enum, default_value = "natural")]
        style: StyleArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite the responses of a JSONL corpus as natural responses.
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generator checkpoint (f2r mode).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Vocabulary; defaults to vocab.json beside the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Pretrain and adversarially train the feedback-to-response converter.
    TrainF2r {
        #[command(flatten)]
        common: Common,
        /// Directory with train.jsonl, valid.jsonl and vocab.json from `ingest`.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Adversarial steps, overriding the config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a retrieval ranker on JSONL conversations.
    TrainRanker {
        #[command(flatten)]
        common: Common,
        /// One or more JSONL corpora.
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// HITS@1/20 of a ranker on JSONL ranking examples.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Ranker checkpoint.
        #[arg(long, visible_alias = "ckpt")]
        ranker: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Directory for metrics.json and its manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ranker settings on configured data, or the synthetic end-to-end pipeline.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Adversarial steps of the synthetic pipeline, overriding the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Converter generator checkpoint for FEED2RESP on real data.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Run only these settings on real data.
        #[arg(long, num_args = 1..)]
        setting: Vec<String>,
    },
    /// Write the discriminator's pooling attention for every input response.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        /// Discriminator checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        /// JSONL output, one attention map per input record.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dialogue world: corpora, oracle pairs and ranking sets.
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

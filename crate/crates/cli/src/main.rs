//! `gqa`: train, convert, evaluate, sweep, analyse and benchmark grouped-query
//! attention ViTs.
//!
//! Every command writes machine-readable output (JSON or CSV) and echoes the
//! effective configuration into it. Exit status is 0 only when the workflow
//! completed; usage errors exit 2 and everything else exits 1.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{BaseArgs, DataArgs, ModelArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(
    name = "gqa",
    version,
    about = "Grouped-query attention lab",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from scratch (uptrain recipe: AdamW, lr 1e-4).
    Train {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Directory for JSON-lines logs (default: <out stem>-run next to --out).
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Continue training a checkpoint with fresh optimizer state (lr 1e-5).
    Finetune {
        #[command(flatten)]
        base: BaseArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Mean-pool a multi-head checkpoint's key/value heads into G groups.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        kv_heads: usize,
        /// Variant of the result (default: gqa, or mqa for one group).
        #[arg(long)]
        variant: Option<gqa_core::Variant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and loss of a checkpoint as JSON.
    Eval {
        #[command(flatten)]
        base: BaseArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Evaluate on the training split instead of the test split.
        #[arg(long)]
        train_split: bool,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Also write the JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per key/value head count and report accuracy (CSV).
    SweepKv {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated key/value head counts.
        #[arg(long, value_delimiter = ',', required = true)]
        gs: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        eval_batch: usize,
        /// CSV path; the config goes to <out>.config.json. Stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Head-similarity, allocation and blend diagnostics.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Inference latency of several variants on identical inputs.
    Bench {
        #[command(flatten)]
        base: BaseArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated variants; repeats are allowed.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<gqa_core::Variant>,
        #[arg(long, default_value_t = 288)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// f32 or f64.
        #[arg(long, default_value = "f32")]
        precision: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum Analyze {
    /// Cosine similarity between per-head outputs of one layer (CSV).
    Heads {
        #[command(flatten)]
        base: BaseArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Encoder layer (default: the last).
        #[arg(long)]
        layer: Option<usize>,
        /// Images fed through the model.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// CSV path; the summary JSON goes to <out>.json. Stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Share of non-uniform allocations in allocation logs (JSON).
    Alloc {
        /// One or more alloc.jsonl files.
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Query heads (default: read from the log header).
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        kv_heads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Least-squares weight of an MHA matrix in a target similarity matrix (JSON).
    Blend {
        /// Similarity CSV to explain.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        gqa: PathBuf,
        #[arg(long)]
        mha: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! Command-line surface: `train`, `index`, `search` and `eval`.
//!
//! Every failure is reported as one line `error[CODE]: message` on stderr
//! with a nonzero exit status. Usage errors use the code `E_USAGE` and exit 2.
//! Log verbosity comes from the `COLXM_LOG` environment variable.

mod commands;
mod config;
mod data;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{cmd_eval, cmd_index, cmd_search, cmd_train, IndexSummary, NAMES_FILE};
pub use config::RunConfig;
pub use data::{
    embeddings_from_bytes, embeddings_to_bytes, parse_records, parse_triples, read_embeddings,
    read_records, read_triples, write_embeddings, Content, CorpusRecord, Record, Records,
    TripleIds,
};

use crate::encoder::Stage;
use crate::error::Error;

pub const LOG_ENV: &str = "COLXM_LOG";

#[derive(Debug, Parser)]
#[command(name = "colxm", version, about = "Modular multi-vector retrieval toolkit")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the encoder and write a checkpoint.
    Train(TrainArgs),
    /// Build a compressed index from embeddings or encoded text.
    Index(IndexArgs),
    /// Search an index and write a TREC run file.
    Search(SearchArgs),
    /// Score a run file against qrels.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
    Extend,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Finetune => Stage::Finetune,
            StageArg::Extend => Stage::Extend,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Passage records (JSONL); repeatable.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// Query records (JSONL) referenced by the triples; repeatable.
    #[arg(long)]
    pub queries: Vec<PathBuf>,
    /// `query_id positive_id negative_id` lines.
    #[arg(long)]
    pub triples: Option<PathBuf>,
    /// Run a single stage. Without it: pretrain, then finetune if triples are given.
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    /// Checkpoint to continue from; required for finetune and extend.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Restricts training to one language; the language to add when extending.
    #[arg(long)]
    pub lang: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss curve as CSV `stage,step,loss`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct IndexArgs {
    /// Passage records (JSONL); text records need `--checkpoint`.
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    /// Binary embeddings block; bypasses the encoder.
    #[arg(long, conflicts_with_all = ["corpus", "checkpoint"])]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Query records (JSONL); text records need `--checkpoint`.
    #[arg(long, required = true)]
    pub queries: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub nprobe: Option<usize>,
    #[arg(long = "candidate-k")]
    pub candidate_k: Option<usize>,
    /// Results per query.
    #[arg(long)]
    pub k: Option<usize>,
    /// Exhaustive MaxSim over the decompressed corpus instead of the index.
    #[arg(long)]
    pub exact: bool,
    /// Print a per-query latency summary to stderr.
    #[arg(long)]
    pub latency: bool,
    /// Run tag written in the last column.
    #[arg(long, default_value = "colxm")]
    pub tag: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Comma-separated list, e.g. `mrr@10,recall@100`.
    #[arg(long, default_value = "mrr@10,recall@100")]
    pub metrics: String,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    // A second initialization (tests calling `main_with_args` repeatedly) is harmless.
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), single_line(&e));
            1
        }
    }
}

fn single_line(e: &Error) -> String {
    e.to_string().replace(['\n', '\r'], " ")
}

pub fn run(cli: &Cli) -> crate::Result<()> {
    let config = RunConfig::load_or_default(cli.config.as_deref())?;
    match &cli.command {
        Command::Train(a) => cmd_train(&config, a),
        Command::Index(a) => {
            let summary = cmd_index(&config, a)?;
            println!("embeddings: {}", summary.embeddings);
            println!("centroids: {}", summary.centroids);
            println!("bits/vector: {}", summary.bits_per_vector);
            Ok(())
        }
        Command::Search(a) => cmd_search(&config, a).map(|_| ()),
        Command::Eval(a) => {
            for (metric, report) in cmd_eval(a)? {
                println!(
                    "{metric}\t{:.6}\tevaluated={} skipped_unjudged={} skipped_no_relevant={}",
                    report.value, report.evaluated, report.skipped_unjudged.len(), report.skipped_no_relevant.len()
                );
            }
            Ok(())
        }
    }
}

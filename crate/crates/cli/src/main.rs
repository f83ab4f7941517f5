use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod errors;
mod fixtures;
mod selftest;

pub use errors::CliError;

/// Self-supervised meta-learning for few-shot text classification.
#[derive(Debug, Parser)]
#[command(name = "smlmt", version)]
pub struct Cli {
    /// key = value file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true, env = "MF_SEED")]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize a corpus and build the word index.
    BuildCorpus(BuildCorpusArgs),
    /// Write episode JSONL shards.
    GenTasks(GenTasksArgs),
    /// Meta-train and write a checkpoint and a per-episode log.
    MetaTrain(MetaTrainArgs),
    /// k-shot fine-tuning evaluation on labeled target tasks.
    Evaluate(EvaluateArgs),
    /// Step-size trajectories and representation similarity.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient checks; fails on any mismatch.
    Gradcheck(GradcheckArgs),
    /// Property suites on the bundled fixtures.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct BuildCorpusArgs {
    /// Raw text files, concatenated in order.
    #[arg(long, value_name = "FILE", required_unless_present = "fixture")]
    input: Vec<PathBuf>,
    /// Use the bundled 200-sentence planted corpus.
    #[arg(long, conflicts_with = "input")]
    fixture: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// lines or raw
    #[arg(long)]
    split_mode: Option<String>,
}

#[derive(Debug, Args)]
struct GenTasksArgs {
    /// Directory written by build-corpus.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_episodes: Option<u64>,
    /// Probability of an SMLMT episode; below 1 needs --supervised.
    #[arg(long)]
    lambda: Option<f64>,
    /// Labeled JSONL task files for hybrid sampling.
    #[arg(long, value_name = "FILE")]
    supervised: Vec<PathBuf>,
    /// Record the masked words in each episode.
    #[arg(long)]
    debug_secrets: bool,
    #[arg(long)]
    shard_size: Option<u64>,
}

#[derive(Debug, Args)]
struct MetaTrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_name = "FILE")]
    supervised: Vec<PathBuf>,
    /// Outer learning rate.
    #[arg(long)]
    beta: Option<f64>,
    /// Episodes per epoch.
    #[arg(long)]
    episodes: Option<u64>,
    /// sgd or adam
    #[arg(long)]
    optimizer: Option<String>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long, value_name = "FILE")]
    init: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Directory written by build-corpus (its token table encodes tasks).
    #[arg(long)]
    corpus: PathBuf,
    /// Target task JSONL files with text, label and split (pool or test).
    #[arg(long, value_name = "FILE", required = true)]
    task: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated support sizes per class.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    draws: Option<usize>,
    /// Use ft_epochs and ft_batch instead of a grid search.
    #[arg(long)]
    no_grid: bool,
    /// Also adapt warp layers while fine-tuning.
    #[arg(long)]
    adapt_warp: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Training log written by meta-train.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint for the before/after fine-tuning CCA.
    #[arg(long, value_name = "FILE", requires_all = ["corpus", "task"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Target task whose pool drives fine-tuning and whose test inputs are
    /// compared.
    #[arg(long, value_name = "FILE")]
    task: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config::RunConfig::load(cli.config.as_deref())?;
    cfg.flag("seed", cli.seed);
    cfg.flag("workers", cli.workers);
    match cli.command {
        Command::BuildCorpus(a) => commands::build_corpus(cfg, a),
        Command::GenTasks(a) => commands::gen_tasks(cfg, a),
        Command::MetaTrain(a) => commands::meta_train(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Analyze(a) => commands::analyze(cfg, a),
        Command::Gradcheck(a) => commands::gradcheck(cfg, a),
        Command::Selftest(a) => selftest::run(cfg, a.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

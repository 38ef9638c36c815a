//! `mcsv`: generate a synthetic corpus, train, evaluate and check the losses.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcsv::losses::LossVariant;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mcsv",
    version,
    about = "Self-supervised speaker embeddings with margin contrastive losses"
)]
#[command(after_help = "MC_SEED overrides the configured base seed.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize training and held-out corpora plus a trial list.
    GenData(GenDataArgs),
    /// Train an encoder on the unlabeled training corpus.
    Train(TrainArgs),
    /// Score a trial list with a trained encoder.
    Evaluate(EvaluateArgs),
    /// Compare loss gradients and values against independent references.
    Losscheck(LosscheckArgs),
    /// Summarize a scores file.
    ScoreStats(ScoreStatsArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// JSON config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; `train/` and `test/` are created under it.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// ntxent, sntxent, am or aam.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossVariant>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train on clean crops.
    #[arg(long)]
    no_augment: bool,
    /// Take embeddings straight from the encoder.
    #[arg(long)]
    no_projector: bool,
    /// Learn the margin instead of following the schedule.
    #[arg(long)]
    learnable_margin: bool,
    /// Continue from a checkpoint written by an earlier run with the same settings.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Prepare batches on a background thread.
    #[arg(long)]
    pipelined: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Run directory holding `config.json` and `model.ckpt`.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    /// Checkpoint file; needs `--config` unless it sits in a run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trial list, `label enroll test` per line; defaults to the held-out list.
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Corrupt held-out audio with additive noise before embedding.
    #[arg(long)]
    noisy: bool,
    /// Where scores and summaries go; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LosscheckArgs {
    /// Rows per batch; batches of varying size are used when omitted.
    #[arg(long, value_parser = parse_check_batch)]
    batch_size: Option<usize>,
    #[arg(long, hide = true, value_parser = ["am-sign-flip"])]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct ScoreStatsArgs {
    /// CSV written by `evaluate`.
    #[arg(long)]
    scores: PathBuf,
    /// Histogram CSV destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_check_batch(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        Ok(n) => Err(mcsv::Error::BatchTooSmall(n).to_string()),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_loss(s: &str) -> Result<LossVariant, String> {
    s.parse().map_err(|e: mcsv::Error| e.to_string())
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<mcsv::Error> for Failure {
    fn from(e: mcsv::Error) -> Self {
        match e {
            mcsv::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Losscheck(a) => commands::losscheck(a),
        Command::ScoreStats(a) => commands::score_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

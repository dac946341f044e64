use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use u2kws::KwsError;

mod cmd;
mod data;
mod stamp;

#[derive(Parser)]
#[command(
    name = "u2kws",
    version,
    about = "Two-pass open-vocabulary keyword spotting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus directory.
    Synth(SynthArgs),
    /// Train one stage of a model on a corpus directory.
    Train(TrainArgs),
    /// Run the streaming cascade over manifests and write detection JSONL.
    Detect(DetectArgs),
    /// Score a detection log: ROC CSV, F1 table and a summary.
    Eval(EvalArgs),
    /// Dump the posteriorgram, best path and segment of one keyword on one utterance.
    Inspect(InspectArgs),
}

#[derive(clap::Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus config JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to continue from (its model config is reused).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Model config JSON for a fresh model; defaults to the desk layout.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stop after this many updates.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Epochs for this stage, overriding the config.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fresh model without keyword encoder, bias or decoder.
    #[arg(long)]
    pub baseline: bool,
    /// Per-step loss CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Off,
    Causal,
    Full,
}

#[derive(clap::Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus splits to run, e.g. `test_pos`; default `test_pos` and `test_neg`.
    #[arg(long = "split")]
    pub splits: Vec<String>,
    /// Extra manifests with a feature archive next to them.
    #[arg(long = "manifest")]
    pub manifests: Vec<PathBuf>,
    /// Keyword list replacing the corpus keywords.
    #[arg(long)]
    pub keywords: Option<PathBuf>,
    /// Cascade config JSON.
    #[arg(long)]
    pub cascade: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, allow_negative_numbers = true)]
    pub stage1_threshold: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub stage2_threshold: Option<f64>,
    /// Lowest thresholds, so every candidate is logged with its scores.
    #[arg(long)]
    pub permissive: bool,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ScoreKind {
    Stage1,
    Stage2,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    /// Directory with `phones.txt`, `lexicon.tsv` and `keywords.txt`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Labeled positive manifests; default `<corpus>/test_pos.jsonl`.
    #[arg(long = "positives")]
    pub positives: Vec<PathBuf>,
    /// Keyword-free manifests; default `<corpus>/test_neg.jsonl`.
    #[arg(long = "negatives")]
    pub negatives: Vec<PathBuf>,
    /// Negative duration; computed from the negative features when absent.
    #[arg(long)]
    pub negative_hours: Option<f64>,
    #[arg(long, value_enum, default_value = "stage2")]
    pub score: ScoreKind,
    /// First-stage gate applied before stage-2 scores count.
    #[arg(long, allow_negative_numbers = true)]
    pub stage1_threshold: Option<f64>,
    /// Operating threshold; chosen to maximize macro-F1 when absent.
    #[arg(long, allow_negative_numbers = true)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub require_overlap: bool,
    /// System label in the F1 table.
    #[arg(long, default_value = "system")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test_pos")]
    pub split: String,
    /// Utterance id.
    #[arg(long)]
    pub utt: String,
    /// Keyword text; defaults to the utterance's label.
    #[arg(long)]
    pub keyword: Option<String>,
    /// Streaming chunk size in encoder frames; full context when absent.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Units kept per frame in the posteriorgram dump.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// 2: bad arguments or config, 3: missing or unreadable input, 4: training
/// diverged, 1: anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<KwsError>() {
            return match e {
                KwsError::Config(_) | KwsError::MissingModule(_) | KwsError::NoKeywords => 2,
                KwsError::Io(_) | KwsError::Manifest(_) | KwsError::Wav(_) => 3,
                KwsError::Diverged(_) => 4,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd::synth(a),
        Command::Train(a) => cmd::train(a),
        Command::Detect(a) => cmd::detect(a),
        Command::Eval(a) => cmd::eval(a),
        Command::Inspect(a) => cmd::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

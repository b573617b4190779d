mod commands;
mod config;
mod error;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use erc_core::augmentation::BasicEmotion;
use erc_core::corpus::Split;
use erc_core::curriculum::DiffSpeakerMode;

use config::{parse_seeds, parse_target, Backend, SeedList};
use error::CliError;

/// Emotion recognition in conversation: curriculum ordering, demonstration
/// retrieval, prompting, evaluation and data augmentation.
#[derive(Debug, Parser)]
#[command(name = "erc", version, subcommand_required = true, arg_required_else_help = true)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved configuration to stderr and log progress.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a dataset file to the corpus JSONL format.
    Ingest(IngestArgs),
    /// Per-conversation difficulty reports (JSONL).
    Difficulty(DifficultyArgs),
    /// Curriculum buckets and the per-epoch manifest.
    Plan(PlanArgs),
    /// Embed labeled corpora into a demonstration repository.
    BuildRepo(BuildRepoArgs),
    /// Nearest repository entries for a query text.
    Retrieve(RetrieveArgs),
    /// Speaker traits and emotion interpretations for every utterance.
    Knowledge(KnowledgeArgs),
    /// Print the recognition prompt for one utterance.
    RenderPrompt(RenderPromptArgs),
    /// Predict every utterance of a corpus with one seed.
    Predict(PredictArgs),
    /// Score a corpus over several seeds, or rescore prediction logs.
    Evaluate(EvaluateArgs),
    /// Generation and annotation rounds for the augmented dataset.
    #[command(subcommand)]
    Augment(AugmentCommand),
    /// Serve the annotation HTTP API.
    ServeAnnotation(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InputFormat {
    Jsonl,
    MeldCsv,
    Emorynlp,
    Tsv,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    format: InputFormat,
    /// Dataset name; defaults to the name in the file or its stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    /// Label-set manifest `{"name", "labels"}`; fixes the label order.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct WesArgs {
    #[arg(long)]
    wheel: Option<PathBuf>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<DiffSpeakerMode>,
}

#[derive(Debug, Args)]
struct DifficultyArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    wes: WesArgs,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Corpus to score; alternatively pass precomputed `--difficulty` reports.
    #[arg(long, required_unless_present = "difficulty", conflicts_with = "difficulty")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    difficulty: Option<PathBuf>,
    #[command(flatten)]
    wes: WesArgs,
    #[arg(long)]
    buckets: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Manifest JSONL; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long, value_enum)]
    embedder: Option<Backend>,
    #[arg(long)]
    embed_model: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Debug, Args)]
struct BuildRepoArgs {
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[command(flatten)]
    embed: EmbedArgs,
    #[arg(long, default_value_t = erc_core::retrieval::DEFAULT_EMBED_BATCH)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    #[arg(long)]
    repo: PathBuf,
    #[arg(long)]
    query: String,
    /// Number of results.
    #[arg(long)]
    k: Option<usize>,
    /// `source/dialogue_id` to leave out; repeatable.
    #[arg(long)]
    exclude: Vec<String>,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Debug, Args)]
struct ChatArgs {
    #[arg(long, value_enum)]
    chat: Option<Backend>,
    /// Recognition model id; `{seed}` is replaced by the seed.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    knowledge_model: Option<String>,
    /// Response cache file (JSONL, append-only).
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KnowledgeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    #[command(flatten)]
    chat: ChatArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    retrieval_k: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Allow demonstrations from the target's own dialogue.
    #[arg(long)]
    include_own_dialogue: bool,
    /// Knowledge JSONL from the `knowledge` subcommand.
    #[arg(long)]
    knowledge: Option<PathBuf>,
    /// Demonstration repository; no demonstrations without it.
    #[arg(long)]
    repo: Option<PathBuf>,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Debug, Args)]
struct RenderPromptArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dialogue: String,
    #[arg(long)]
    index: usize,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    chat: ChatArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Prediction log (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Prompt log (JSONL).
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Corpus file, or a directory holding `<split>.jsonl`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    chat: ChatArgs,
    /// A count (`5` runs seeds 0..5) or a list (`1,4,9`).
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    /// Existing prediction logs to rescore instead of running the model.
    #[arg(long, conflicts_with = "seeds")]
    predictions: Vec<PathBuf>,
    /// Directory for per-seed logs and report.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum AugmentCommand {
    /// Open the next round: compute deficits, generate, enqueue for annotation.
    Start(AugmentStartArgs),
    /// Close the open round and ingest accepted utterances.
    Close(AugmentCloseArgs),
    /// Rounds, tallies and remaining deficit.
    Status(AugmentStatusArgs),
}

#[derive(Debug, Args)]
struct AugmentStartArgs {
    #[arg(long)]
    state: PathBuf,
    /// `emotion=count`; repeatable. Only used when the state file is new.
    #[arg(long = "target", value_parser = parse_target)]
    targets: Vec<(BasicEmotion, usize)>,
    /// Existing corpus whose counts go toward the targets.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, value_enum)]
    chat: Option<Backend>,
    /// Generation model id.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    max_dialogues: Option<usize>,
}

#[derive(Debug, Args)]
struct AugmentCloseArgs {
    #[arg(long)]
    state: PathBuf,
    /// Write the augmented corpus here after closing.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AugmentStatusArgs {
    #[arg(long)]
    state: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Static UI assets served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: erc_core::corpus::CorpusError| e.to_string())
}

fn parse_mode(s: &str) -> Result<DiffSpeakerMode, String> {
    s.parse().map_err(|e: erc_core::curriculum::CurriculumError| e.to_string())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                std::process::exit(0);
            }
            let first = e.to_string().lines().next().unwrap_or_default().to_string();
            eprintln!("{}", CliError::usage(first).to_json());
            std::process::exit(2);
        }
    };
    let level = if cli.verbose { tracing::Level::INFO } else { tracing::Level::WARN };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    if let Err(e) = commands::run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.code());
    }
}

//! Single entry point wiring corpus generation, vocabulary building, event
//! extraction, negative mining, training, ablation, prompt search, indexing,
//! search and evaluation into reproducible pipelines.
//!
//! Exit codes: 0 success, 1 bad flags or invalid inputs, 2 runtime failure.
//! Logging goes to stderr, controlled by EER_LOG={debug,info,warn}.

mod meta;
mod pipeline;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

/// Validation failures exit 1; failures mid-computation exit 2.
#[derive(Debug)]
pub enum CliError {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

pub trait Classify<T> {
    fn invalid(self) -> Result<T, CliError>;
    fn runtime(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Invalid(e.into()))
    }

    fn runtime(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(anyhow::anyhow!(msg.into()))
}

#[derive(Parser)]
#[command(
    name = "eer",
    version,
    about = "Event-enhanced dual-tower retrieval pipelines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic headline corpus with gold event triples.
    GenCorpus(GenCorpusArgs),
    /// Build a vocabulary from a corpus directory.
    BuildVocab(BuildVocabArgs),
    /// Run the rule-based event extractor over corpus titles.
    ExtractEvents(ExtractEventsArgs),
    /// Mine semantic hard negatives with a trained encoder.
    MineNegatives(MineNegativesArgs),
    /// Train the dual-tower model.
    Train(TrainArgs),
    /// Train and evaluate the full component-ablation lattice.
    Ablate(AblateArgs),
    /// Train once per prompt template and compare.
    PromptSearch(PromptSearchArgs),
    /// Strip training-only tensors from a checkpoint.
    Export(ExportArgs),
    /// Embed corpus titles into a dense index.
    Index(IndexArgs),
    /// Query a dense index.
    Search(SearchArgs),
    /// Score a run file against relevance judgments.
    Eval(EvalArgs),
    /// Dump pooled embeddings as TSV for external analysis.
    ExportEmbeddings(ExportEmbeddingsArgs),
}

#[derive(clap::Args)]
pub struct GenCorpusArgs {
    /// Number of distinct events to synthesize.
    #[arg(long, default_value_t = 200)]
    pub events: usize,
    #[arg(long)]
    pub seed: u64,
    /// Hold out this fraction of events into an eval split
    /// (writes train/ and eval/ subdirectories).
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub queries_per_event: usize,
    #[arg(long, default_value_t = 3)]
    pub titles_per_event: usize,
    #[arg(long, default_value_t = 3)]
    pub negatives_per_positive: usize,
    #[arg(long, default_value_t = 40)]
    pub entity_pool: usize,
    #[arg(long, default_value_t = 16)]
    pub verb_pool: usize,
    #[arg(long, default_value_t = 40)]
    pub object_pool: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct BuildVocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Tokens appearing fewer times than this are dropped.
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    /// Reserved trainable prompt-slot tokens.
    #[arg(long, default_value_t = 4)]
    pub prompt_slots: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct ExtractEventsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Verb lexicon file, one trigger per line. Defaults to the triggers of
    /// the corpus gold events.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct MineNegativesArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Candidates retrieved per query before band filtering.
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    /// Hard negatives kept per query.
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    /// Inclusive lower cosine bound of the mining band.
    #[arg(long, default_value_t = 0.4)]
    pub lower: f64,
    /// Exclusive upper cosine bound of the mining band.
    #[arg(long, default_value_t = 0.8)]
    pub upper: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Held-out corpus for per-epoch retrieval metrics.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Full training configuration as JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Required unless --config supplies a seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated objective toggles added to the pairwise base,
    /// e.g. CL,GD,GP,QER. NONE clears the base too.
    #[arg(long)]
    pub toggle: Option<String>,
    #[arg(long, value_enum)]
    pub event_source: Option<EventSourceArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub template_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EventSourceArg {
    Gold,
    Decoded,
}

#[derive(clap::Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub eval_corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds; every lattice row trains once per seed.
    #[arg(long)]
    pub seeds: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct PromptSearchArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub eval_corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated template ids; defaults to the whole registry.
    #[arg(long)]
    pub templates: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One ad-hoc query; results print to stdout.
    #[arg(long)]
    pub query: Option<String>,
    /// Query JSONL file; writes a run file under --out.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    /// Run file: query_id, doc_id, rank, score (TSV).
    #[arg(long)]
    pub run: PathBuf,
    /// Qrels TSV: query_id, doc_id, label.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Corpus directory whose labeled pairs serve as qrels.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated recall cutoffs.
    #[arg(long, default_value = "1,10")]
    pub ks: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct ExportEmbeddingsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// documents embeds titles with the title tower; queries uses the
    /// query tower.
    #[arg(long, value_enum)]
    pub source: EmbeddingSource,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum EmbeddingSource {
    Documents,
    Queries,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EER_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match pipeline::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

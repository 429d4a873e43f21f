//! `tmal`: split, train, embed, index, classify, tune, evaluate and dump.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 numerical failure.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tmal_core::alignment::AlignError;
use tmal_core::corpus::CorpusError;
use tmal_core::nn::NnError;
use tmal_core::retrieval::RetrievalError;

#[derive(Debug, Parser)]
#[command(name = "tmal", version, about = "Tri-modal contrastive alignment and taxonomic retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus (records TSV + image feature matrix).
    Synth(SynthArgs),
    /// Partition records into seen/unseen, query/key splits.
    Split(SplitArgs),
    /// Train the encoders contrastively on the pretrain + seen-train pool.
    Train(TrainArgs),
    /// Embed records of one modality into an embedding store.
    Embed(EmbedArgs),
    /// Build averaged image+DNA keys from two stores.
    Index(IndexArgs),
    /// Classify query embeddings against key stores.
    Classify(ClassifyArgs),
    /// Train a linear probe over seen species on stored image embeddings.
    Probe(ProbeArgs),
    /// Tune the open-set threshold on validation queries.
    Tune(TuneArgs),
    /// Score a predictions file.
    Eval(EvalArgs),
    /// Print a human-readable listing of a checkpoint or store.
    Dump(DumpArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusPaths {
    /// Records TSV.
    #[arg(long)]
    pub records: PathBuf,
    /// Image feature matrix referenced by the records.
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_records: PathBuf,
    #[arg(long)]
    pub out_features: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub species: usize,
    #[arg(long, default_value_t = 50)]
    pub records_per_species: usize,
    #[arg(long, default_value_t = 16)]
    pub d_img: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 60)]
    pub barcode_len: usize,
    /// Falls back to TMAL_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[command(flatten)]
    pub corpus: CorpusPaths,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusPaths,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// JSON trainer config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Comma-separated subset of image,dna,text.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    /// sum or mean.
    #[arg(long)]
    pub reduction: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub corpus: CorpusPaths,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// image, dna or text.
    #[arg(long)]
    pub modality: String,
    /// Output store; the sidecar is written to `<out>.tsv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Restrict to records of these partitions (requires --manifest).
    #[arg(long, value_delimiter = ',')]
    pub partitions: Option<Vec<String>>,
}

#[derive(Debug, Args, Serialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub image_store: PathBuf,
    #[arg(long)]
    pub dna_store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    /// Provides key labels.
    #[command(flatten)]
    pub corpus: CorpusPaths,
    #[arg(long)]
    pub queries: PathBuf,
    /// Key store (seen image keys for is+du).
    #[arg(long)]
    pub keys: Option<PathBuf>,
    /// Unseen DNA key store, for is+du.
    #[arg(long)]
    pub unseen_keys: Option<PathBuf>,
    /// nn or is+du.
    #[arg(long, default_value = "nn")]
    pub strategy: String,
    /// Neighbors listed per query.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Cosine threshold for is+du.
    #[arg(long)]
    pub t1: Option<f64>,
    /// Linear probe replacing the seen image keys in is+du.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Probability threshold for the probe.
    #[arg(long)]
    pub t2: Option<f64>,
    /// Predictions TSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub corpus: CorpusPaths,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Image embedding store covering the seen training records.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TuneArgs {
    #[command(flatten)]
    pub corpus: CorpusPaths,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Query image embeddings (gold seen/unseen status from the manifest).
    #[arg(long)]
    pub queries: PathBuf,
    /// Seen image key store (nn variant).
    #[arg(long)]
    pub keys: Option<PathBuf>,
    #[arg(long)]
    pub unseen_keys: PathBuf,
    /// Tune t2 for this probe instead of t1.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub grid_size: usize,
    /// Also write the result JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusPaths,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated key-count bin edges (default: powers of two).
    #[arg(long, value_delimiter = ',')]
    pub bins: Option<Vec<usize>>,
}

#[derive(Debug, Args, Serialize)]
pub struct DumpArgs {
    /// Checkpoint (TMCK) or feature matrix / store (TMAF).
    pub path: PathBuf,
    /// Rows to print for matrices.
    #[arg(long, default_value_t = 3)]
    pub rows: usize,
}

/// Invalid combination of otherwise well-formed arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Seed precedence: flag, then TMAL_SEED, then 0.
pub fn resolve_seed(flag: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("TMAL_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| UsageError(format!("TMAL_SEED={v:?} is not an unsigned integer")).into()),
        Err(_) => Ok(0),
    }
}

pub fn log_config<T: Serialize>(command: &str, config: &T) {
    let json = serde_json::to_string(config).unwrap_or_else(|e| format!("<unserializable: {e}>"));
    eprintln!("tmal {command}: {json}");
}

fn nn_numerical(e: &NnError) -> bool {
    matches!(e, NnError::NonFinite(_) | NnError::NonFiniteGradient(_) | NnError::DegenerateEmbedding { .. })
}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if let Some(a) = e.downcast_ref::<AlignError>() {
            return match a {
                AlignError::Divergence { .. } => true,
                AlignError::Nn(n) => nn_numerical(n),
                _ => false,
            };
        }
        if let Some(RetrievalError::Nn(n)) = e.downcast_ref::<RetrievalError>() {
            return nn_numerical(n);
        }
        if let Some(n) = e.downcast_ref::<NnError>() {
            return nn_numerical(n);
        }
        matches!(e.downcast_ref::<CorpusError>(), Some(CorpusError::NonFinite(_)))
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        1
    } else if is_numerical(err) {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::Index(a) => commands::index(a),
        Command::Classify(a) => commands::classify(a),
        Command::Probe(a) => commands::probe(a),
        Command::Tune(a) => commands::tune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Dump(a) => commands::dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

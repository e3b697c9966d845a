//! `pqe`: embed, cluster, index, search, evaluate, diagnose and benchmark.

mod commands;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pqe_core::synthbench::BenchConfig;
use pqe_core::{Pooling, Representation, RetrievalMode, SynthSpec};

use crate::error::{CliError, Kind};

#[derive(Debug, Parser)]
#[command(
    name = "pqe",
    version,
    about = "Multi-vector dense retrieval with pseudo query embeddings"
)]
struct Cli {
    /// Worker threads for parallel phases [default: all cores]
    #[arg(long, global = true, env = "PQE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode documents into token embeddings (PQEB)
    Embed(EmbedArgs),
    /// Cluster token embeddings into pseudo query embeddings (PQEC)
    Cluster(ClusterArgs),
    /// Build a flat centroid index (PQEI)
    Index(IndexArgs),
    /// Retrieve documents for a queries file and write a TREC run
    Search(SearchArgs),
    /// Score a TREC run against qrels
    Eval(EvalArgs),
    /// Gradient-weight diagnostics per document representation (CSV)
    Diagnose(DiagnoseArgs),
    /// Synthetic end-to-end benchmark (CSV)
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
struct EncoderArgs {
    /// Embedding dimension
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Encoder hashing seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Token truncation limit
    #[arg(long, default_value_t = 512)]
    limit: usize,
}

#[derive(Debug, Clone, Args)]
struct SynthArgs {
    /// Number of synthetic documents
    #[arg(long, default_value_t = 2000)]
    num_docs: usize,
    /// Topic segments per document
    #[arg(long, default_value_t = 4)]
    topics_per_doc: usize,
    /// Tokens per topic segment
    #[arg(long, default_value_t = 24)]
    tokens_per_topic: usize,
    /// Words in each topic's vocabulary
    #[arg(long, default_value_t = 40)]
    vocab_per_topic: usize,
    /// Number of synthetic queries
    #[arg(long, default_value_t = 500)]
    num_queries: usize,
    /// Size of the shared topic pool
    #[arg(long, default_value_t = 200)]
    num_topics: usize,
    /// Words per query
    #[arg(long, default_value_t = 4)]
    query_tokens: usize,
    /// Corpus generator seed
    #[arg(long, default_value_t = 3)]
    synth_seed: u64,
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            num_docs: self.num_docs,
            topics_per_doc: self.topics_per_doc,
            tokens_per_topic: self.tokens_per_topic,
            vocab_per_topic: self.vocab_per_topic,
            num_queries: self.num_queries,
            seed: self.synth_seed,
            num_topics: self.num_topics,
            query_tokens: self.query_tokens,
        }
    }
}

#[derive(Debug, Args)]
struct EmbedArgs {
    /// Documents as `doc_id<TAB>text` lines
    #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
    input: Option<PathBuf>,
    /// Generate a synthetic corpus instead of reading --input
    #[arg(long)]
    synth: bool,
    #[command(flatten)]
    synth_spec: SynthArgs,
    /// Where to write synthetic queries [default: <output>.queries.tsv]
    #[arg(long, requires = "synth")]
    queries_out: Option<PathBuf>,
    /// Where to write synthetic qrels [default: <output>.qrels]
    #[arg(long, requires = "synth")]
    qrels_out: Option<PathBuf>,
    #[command(flatten)]
    encoder: EncoderArgs,
    /// Output PQEB file
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Input PQEB file
    #[arg(long, short)]
    input: PathBuf,
    /// Output PQEC file
    #[arg(long, short)]
    output: PathBuf,
    /// Clusters per document
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Maximum Lloyd iterations
    #[arg(long, default_value_t = 20)]
    max_iters: usize,
    /// Stop once no centroid moves further than this
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Include the [CLS] row in clustering
    #[arg(long)]
    include_cls: bool,
}

#[derive(Debug, Args)]
struct IndexArgs {
    /// Input PQEC file
    #[arg(long, short)]
    input: PathBuf,
    /// Output PQEI file
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// PQEI index file
    #[arg(long)]
    index: PathBuf,
    /// PQEC file the index was built from; checked for consistency
    #[arg(long)]
    centroids: Option<PathBuf>,
    /// Queries as `qid<TAB>text` lines
    #[arg(long, short)]
    queries: PathBuf,
    /// Output TREC run file
    #[arg(long, short)]
    output: PathBuf,
    /// Retrieval mode: two_step, argmax_only or exact
    #[arg(long, default_value_t = RetrievalMode::TwoStep)]
    mode: RetrievalMode,
    /// Cluster count used for the default R [default: the index's largest k]
    #[arg(long)]
    k: Option<usize>,
    /// Candidates kept by the argmax filter [default: 1000*k]
    #[arg(long = "R", id = "R")]
    r: Option<usize>,
    /// Documents returned per query
    #[arg(long, default_value_t = 1000)]
    final_k: usize,
    /// Query pooling: first_token or mean
    #[arg(long, default_value_t = Pooling::FirstToken)]
    pooling: Pooling,
    /// Query embedding dimension [default: the index dimension]
    #[arg(long)]
    dim: Option<usize>,
    /// Encoder hashing seed (must match the documents')
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Query token truncation limit
    #[arg(long, default_value_t = 512)]
    limit: usize,
    /// Run tag written in the last column
    #[arg(long, default_value = "pqe")]
    tag: String,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// TREC run file
    #[arg(long)]
    run: PathBuf,
    /// TREC qrels file
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated metrics
    #[arg(long, default_value = "mrr@10,recall@1000,ndcg@10,top@20")]
    metrics: String,
    /// Also write the full report as JSON
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Input PQEB file
    #[arg(long, short)]
    input: PathBuf,
    /// Queries as `qid<TAB>text` lines
    #[arg(long, short)]
    queries: PathBuf,
    /// Qrels naming each query's positive document
    #[arg(long)]
    qrels: PathBuf,
    /// Output CSV file
    #[arg(long, short)]
    output: PathBuf,
    /// Representations to compare
    #[arg(long, value_delimiter = ',', default_value = "centroids,first_k,random_k")]
    strategies: Vec<Representation>,
    /// Vectors per document representation
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Queries per in-batch-negatives batch
    #[arg(long, default_value_t = 5)]
    batch_size: usize,
    /// Query pooling: first_token or mean
    #[arg(long, default_value_t = Pooling::FirstToken)]
    pooling: Pooling,
    /// Encoder hashing seed (must match the documents')
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Query token truncation limit
    #[arg(long, default_value_t = 512)]
    limit: usize,
    /// Seed for random_k row selection
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    synth_spec: SynthArgs,
    /// Configurations as k[:mode[:R]]
    #[arg(long, value_delimiter = ',', default_value = "1,4,8,16,32")]
    configs: Vec<BenchConfig>,
    /// Embedding dimension
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Encoder hashing seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timing repetitions per phase (median reported)
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    /// Documents returned per query
    #[arg(long, default_value_t = 100)]
    final_k: usize,
    /// Output CSV file
    #[arg(long, short)]
    output: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::validation(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Embed(a) => commands::embed(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Index(a) => commands::index(a),
        Command::Search(a) => commands::search(a),
        Command::Eval(a) => commands::eval(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Bench(a) => commands::bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default();
            let message = first.strip_prefix("error: ").unwrap_or(first);
            return CliError::new(Kind::Usage, message).report();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use pqe_core::{BenchOptions, ClusterConfig};

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn synth_flag_defaults_match_library() {
        let cli = Cli::parse_from(["pqe", "bench", "-o", "x.csv"]);
        let Command::Bench(b) = cli.command else { unreachable!() };
        assert_eq!(b.synth_spec.spec(), SynthSpec::default());
        let options = BenchOptions::default();
        assert_eq!(
            (b.dim, b.seed, b.repetitions, b.final_k),
            (options.dim, options.embed_seed, options.repetitions, options.final_k)
        );
    }

    #[test]
    fn cluster_flag_defaults_match_library() {
        let cli = Cli::parse_from(["pqe", "cluster", "-i", "a", "-o", "b"]);
        let Command::Cluster(c) = cli.command else {
            unreachable!()
        };
        let d = ClusterConfig::default();
        assert_eq!(
            (c.k, c.max_iters, c.tol, c.include_cls),
            (d.k, d.max_iters, d.tol, d.include_cls)
        );
    }
}

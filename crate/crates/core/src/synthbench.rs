//! Synthetic topical corpora and the benchmark harness.
//!
//! Every topic owns a random five-letter stem and a vocabulary of
//! `stem + suffix` words, so the stub encoder's trigram features give words of
//! one topic correlated embeddings. A document concatenates `topics_per_doc`
//! segments, each drawing `tokens_per_topic` words from one topic. A query
//! samples `query_tokens` words from one segment of one document, which is its
//! only relevant document.

use std::collections::HashSet;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_corpus, ClusterConfig, ClusterError, PseudoQuerySet};
use crate::embedstub::{embed_text, EmbedError, TokenEmbeddingMatrix, DEFAULT_TOKEN_LIMIT};
use crate::evalkit::{evaluate, EvalError, Metric, Qrels};
use crate::index::{CentroidIndex, IndexError, RankedList, RetrievalConfig, RetrievalMode};
use crate::score::{pool_query, Pooling, QueryEmbedding};

const STEM_LEN: u32 = 5;
const ALPHABET: &[u8; 26] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("vocabulary exhausted: {0}")]
    VocabularyExhausted(String),
    #[error("no benchmark configs")]
    NoConfigs,
    #[error("document {doc_id:?}: {source}")]
    Embed {
        doc_id: String,
        #[source]
        source: EmbedError,
    },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_docs: usize,
    pub topics_per_doc: usize,
    pub tokens_per_topic: usize,
    pub vocab_per_topic: usize,
    pub num_queries: usize,
    pub seed: u64,
    /// Size of the shared topic pool documents draw from.
    pub num_topics: usize,
    pub query_tokens: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_docs: 2000,
            topics_per_doc: 4,
            tokens_per_topic: 24,
            vocab_per_topic: 40,
            num_queries: 500,
            seed: 3,
            num_topics: 200,
            query_tokens: 4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fields = [
            ("num_docs", self.num_docs),
            ("topics_per_doc", self.topics_per_doc),
            ("tokens_per_topic", self.tokens_per_topic),
            ("vocab_per_topic", self.vocab_per_topic),
            ("num_queries", self.num_queries),
            ("num_topics", self.num_topics),
            ("query_tokens", self.query_tokens),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(SynthError::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if self.query_tokens > self.tokens_per_topic {
            return Err(SynthError::InvalidSpec(format!(
                "query_tokens ({}) exceeds tokens_per_topic ({})",
                self.query_tokens, self.tokens_per_topic
            )));
        }
        let suffixes = ALPHABET.len() * ALPHABET.len();
        if self.vocab_per_topic > suffixes {
            return Err(SynthError::VocabularyExhausted(format!(
                "vocab_per_topic {} exceeds the {suffixes} available suffixes",
                self.vocab_per_topic
            )));
        }
        let stems = 26usize.pow(STEM_LEN);
        if self.num_topics > stems {
            return Err(SynthError::VocabularyExhausted(format!(
                "num_topics {} exceeds the {stems} available stems",
                self.num_topics
            )));
        }
        if self.topics_per_doc > self.num_topics {
            return Err(SynthError::VocabularyExhausted(format!(
                "topics_per_doc {} exceeds num_topics {}",
                self.topics_per_doc, self.num_topics
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// `(doc_id, text)`.
    pub documents: Vec<(String, String)>,
    /// `(qid, text)`.
    pub queries: Vec<(String, String)>,
    pub qrels: Qrels,
    /// Topic ids of each document, in segment order.
    pub doc_topics: Vec<Vec<usize>>,
}

fn random_word(rng: &mut ChaCha8Rng, len: u32) -> String {
    (0..len).map(|_| ALPHABET[rng.gen_range(0..26)] as char).collect()
}

/// Pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut used = HashSet::with_capacity(spec.num_topics);
    let mut vocab: Vec<Vec<String>> = Vec::with_capacity(spec.num_topics);
    for _ in 0..spec.num_topics {
        let stem = loop {
            let s = random_word(&mut rng, STEM_LEN);
            if used.insert(s.clone()) {
                break s;
            }
        };
        let words = sample(&mut rng, ALPHABET.len() * ALPHABET.len(), spec.vocab_per_topic)
            .into_iter()
            .map(|i| format!("{stem}{}{}", ALPHABET[i / 26] as char, ALPHABET[i % 26] as char))
            .collect();
        vocab.push(words);
    }

    let mut documents = Vec::with_capacity(spec.num_docs);
    let mut segments: Vec<Vec<Vec<usize>>> = Vec::with_capacity(spec.num_docs);
    let mut doc_topics = Vec::with_capacity(spec.num_docs);
    for d in 0..spec.num_docs {
        let topics = sample(&mut rng, spec.num_topics, spec.topics_per_doc).into_vec();
        let mut text = String::new();
        let mut doc_segments = Vec::with_capacity(topics.len());
        for &t in &topics {
            let seg: Vec<usize> = (0..spec.tokens_per_topic)
                .map(|_| rng.gen_range(0..spec.vocab_per_topic))
                .collect();
            for &w in &seg {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(&vocab[t][w]);
            }
            doc_segments.push(seg);
        }
        documents.push((format!("D{d}"), text));
        segments.push(doc_segments);
        doc_topics.push(topics);
    }

    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut qrels = Qrels::new();
    for q in 0..spec.num_queries {
        let d = rng.gen_range(0..spec.num_docs);
        let s = rng.gen_range(0..spec.topics_per_doc);
        let topic = doc_topics[d][s];
        let seg = &segments[d][s];
        let words: Vec<&str> = sample(&mut rng, seg.len(), spec.query_tokens)
            .into_iter()
            .map(|i| vocab[topic][seg[i]].as_str())
            .collect();
        let qid = format!("Q{q}");
        qrels.insert(qid.clone(), documents[d].0.clone(), 1);
        queries.push((qid, words.join(" ")));
    }

    Ok(SynthCorpus {
        documents,
        queries,
        qrels,
        doc_topics,
    })
}

/// Encodes `(doc_id, text)` pairs with the stub encoder, in parallel.
pub fn embed_documents(
    docs: &[(String, String)],
    dim: usize,
    seed: u64,
    limit: usize,
) -> Result<Vec<TokenEmbeddingMatrix<f32>>, SynthError> {
    docs.par_iter()
        .map(|(id, text)| {
            embed_text(id.clone(), text, dim, seed, limit).map_err(|source| SynthError::Embed {
                doc_id: id.clone(),
                source,
            })
        })
        .collect()
}

/// Encodes and pools `(qid, text)` pairs.
pub fn embed_queries(
    queries: &[(String, String)],
    dim: usize,
    seed: u64,
    limit: usize,
    pooling: Pooling,
) -> Result<Vec<QueryEmbedding<f32>>, SynthError> {
    Ok(embed_documents(queries, dim, seed, limit)?
        .iter()
        .map(|m| pool_query(m, pooling))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub k: usize,
    pub mode: RetrievalMode,
    /// Candidate count; `None` means `1000·k`.
    #[serde(rename = "R")]
    pub r: Option<usize>,
}

impl BenchConfig {
    pub fn new(k: usize, mode: RetrievalMode) -> Self {
        Self { k, mode, r: None }
    }

    pub fn resolved_r(&self) -> usize {
        self.r.unwrap_or_else(|| RetrievalConfig::for_k(self.k).r)
    }
}

impl std::str::FromStr for BenchConfig {
    type Err = String;

    /// `k:mode` or `k:mode:R`, e.g. `4:two_step:50`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if !(1..=3).contains(&parts.len()) {
            return Err(format!("bad config {s:?} (expected k[:mode[:R]])"));
        }
        let k = parts[0].parse().map_err(|_| format!("bad k in {s:?}"))?;
        let mode = parts.get(1).map_or(Ok(RetrievalMode::TwoStep), |m| m.parse())?;
        let r = parts
            .get(2)
            .map(|r| r.parse().map_err(|_| format!("bad R in {s:?}")))
            .transpose()?;
        Ok(Self { k, mode, r })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub dim: usize,
    pub embed_seed: u64,
    pub token_limit: usize,
    /// Timing repetitions per phase; the median is reported.
    pub repetitions: usize,
    pub final_k: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            dim: 64,
            embed_seed: 0,
            token_limit: DEFAULT_TOKEN_LIMIT,
            repetitions: 5,
            final_k: 100,
            max_iters: 20,
            tol: 1e-4,
        }
    }
}

/// Metric and timing results for one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    pub mode: RetrievalMode,
    #[serde(rename = "R")]
    pub r: usize,
    pub topics_per_doc: usize,
    pub mrr_at_10: f64,
    pub recall_at_100: f64,
    pub top_20: f64,
    pub cluster_ms: f64,
    pub index_ms: f64,
    pub search_ms: f64,
    pub per_query_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: SynthSpec,
    pub options: BenchOptions,
    pub threads: usize,
    pub embed_ms: f64,
    pub rows: Vec<BenchRow>,
}

pub const REPORT_HEADER: &str =
    "k,mode,R,topics_per_doc,mrr@10,recall@100,top@20,cluster_ms,index_ms,search_ms,per_query_ms,threads";

impl BenchReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{REPORT_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.4},{}",
                r.k,
                r.mode,
                r.r,
                r.topics_per_doc,
                r.mrr_at_10,
                r.recall_at_100,
                r.top_20,
                r.cluster_ms,
                r.index_ms,
                r.search_ms,
                r.per_query_ms,
                self.threads
            )?;
        }
        Ok(())
    }

    pub fn row(&self, k: usize, mode: RetrievalMode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.k == k && r.mode == mode)
    }
}

pub fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Runs `f` `reps` times (at least once) and returns the last result with the
/// median wall-clock time in milliseconds.
fn timed<R>(reps: usize, mut f: impl FnMut() -> R) -> (R, f64) {
    let mut times = Vec::with_capacity(reps.max(1));
    let mut out = None;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        out = Some(f());
        times.push(ms(start.elapsed()));
    }
    (out.expect("ran at least once"), median(times))
}

/// Effectiveness of one retrieval run against `qrels`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub mrr_at_10: f64,
    pub recall_at_100: f64,
    pub top_20: f64,
}

pub fn score_run(runs: &[RankedList], qrels: &Qrels) -> Result<RunMetrics, SynthError> {
    let metrics = [Metric::Mrr(10), Metric::Recall(100), Metric::Top(20)];
    let report = evaluate(runs, qrels, &metrics)?;
    Ok(RunMetrics {
        mrr_at_10: report.mean(metrics[0]).unwrap_or(0.0),
        recall_at_100: report.mean(metrics[1]).unwrap_or(0.0),
        top_20: report.mean(metrics[2]).unwrap_or(0.0),
    })
}

pub fn retrieval_config(config: &BenchConfig, final_k: usize) -> RetrievalConfig {
    let r = config.resolved_r();
    RetrievalConfig {
        r,
        final_k: if config.mode == RetrievalMode::TwoStep {
            final_k.min(r)
        } else {
            final_k
        },
        mode: config.mode,
    }
}

/// Generates, embeds, clusters, indexes and searches the corpus once per config.
pub fn run_benchmark(
    spec: &SynthSpec,
    configs: &[BenchConfig],
    options: &BenchOptions,
) -> Result<BenchReport, SynthError> {
    if configs.is_empty() {
        return Err(SynthError::NoConfigs);
    }
    let corpus = generate(spec)?;
    let (docs, embed_ms) = timed(1, || {
        embed_documents(&corpus.documents, options.dim, options.embed_seed, options.token_limit)
    });
    let docs = docs?;
    let queries = embed_queries(
        &corpus.queries,
        options.dim,
        options.embed_seed,
        options.token_limit,
        Pooling::FirstToken,
    )?;

    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let cluster_cfg = ClusterConfig {
            k: config.k,
            max_iters: options.max_iters,
            tol: options.tol,
            include_cls: false,
        };
        let (sets, cluster_ms) = timed(options.repetitions, || cluster_corpus(&docs, &cluster_cfg));
        let sets: Vec<PseudoQuerySet<f32>> = sets?;
        let (index, index_ms) = timed(options.repetitions, || CentroidIndex::build(&sets));
        let index = index?;
        let rc = retrieval_config(config, options.final_k);
        let (runs, search_ms) = timed(options.repetitions, || index.retrieve_all(&queries, &rc));
        let runs = runs?;
        let m = score_run(&runs, &corpus.qrels)?;
        rows.push(BenchRow {
            k: config.k,
            mode: config.mode,
            r: rc.r,
            topics_per_doc: spec.topics_per_doc,
            mrr_at_10: m.mrr_at_10,
            recall_at_100: m.recall_at_100,
            top_20: m.top_20,
            cluster_ms,
            index_ms,
            search_ms,
            per_query_ms: search_ms / queries.len() as f64,
        });
    }
    Ok(BenchReport {
        spec: *spec,
        options: *options,
        threads: rayon::current_num_threads(),
        embed_ms,
        rows,
    })
}

/// Median single-threaded latency of one query, over all `queries` and `reps`
/// passes.
pub fn median_query_latency(
    index: &CentroidIndex<f32>,
    queries: &[QueryEmbedding<f32>],
    config: &RetrievalConfig,
    reps: usize,
) -> Result<Duration, SynthError> {
    let mut times = Vec::with_capacity(queries.len() * reps.max(1));
    for _ in 0..reps.max(1) {
        for q in queries {
            let start = Instant::now();
            let list = index.retrieve(&q.qid, &q.vector, config)?;
            times.push(start.elapsed().as_secs_f64());
            std::hint::black_box(list);
        }
    }
    Ok(Duration::from_secs_f64(median(times)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_docs: 30,
            topics_per_doc: 3,
            tokens_per_topic: 8,
            vocab_per_topic: 12,
            num_queries: 10,
            seed: 11,
            num_topics: 20,
            query_tokens: 3,
        }
    }

    #[test]
    fn generation_counts_and_determinism() {
        let spec = SynthSpec {
            num_docs: 200,
            topics_per_doc: 4,
            num_queries: 100,
            seed: 3,
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a.documents.len(), 200);
        assert_eq!(a.queries.len(), 100);
        assert_eq!(a.qrels.len(), 100);
        assert_eq!(a, generate(&spec).unwrap());
        for (_, text) in &a.documents {
            assert_eq!(text.split(' ').count(), 4 * spec.tokens_per_topic);
        }
    }

    #[test]
    fn queries_come_from_their_relevant_document() {
        let c = generate(&small()).unwrap();
        for (qid, text) in &c.queries {
            let rel: Vec<&str> = c.qrels.query(qid).unwrap().keys().map(String::as_str).collect();
            assert_eq!(rel.len(), 1);
            let doc = &c.documents.iter().find(|(id, _)| id == rel[0]).unwrap().1;
            for w in text.split(' ') {
                assert!(doc.split(' ').any(|d| d == w), "{w} not in {}", rel[0]);
            }
        }
    }

    #[test]
    fn single_topic_documents() {
        let spec = SynthSpec {
            topics_per_doc: 1,
            ..small()
        };
        let c = generate(&spec).unwrap();
        assert!(c.doc_topics.iter().all(|t| t.len() == 1));
    }

    #[test]
    fn spec_validation() {
        let mut s = small();
        s.num_docs = 0;
        assert!(matches!(generate(&s), Err(SynthError::InvalidSpec(_))));
        let mut s = small();
        s.vocab_per_topic = 10_000;
        assert!(matches!(generate(&s), Err(SynthError::VocabularyExhausted(_))));
        let mut s = small();
        s.topics_per_doc = 50;
        assert!(matches!(generate(&s), Err(SynthError::VocabularyExhausted(_))));
    }

    #[test]
    fn bench_config_parsing() {
        assert_eq!(
            "4".parse::<BenchConfig>().unwrap(),
            BenchConfig::new(4, RetrievalMode::TwoStep)
        );
        let c: BenchConfig = "8:exact:50".parse().unwrap();
        assert_eq!((c.k, c.mode, c.r), (8, RetrievalMode::Exact, Some(50)));
        assert_eq!(BenchConfig::new(4, RetrievalMode::TwoStep).resolved_r(), 4000);
        assert!("x:exact".parse::<BenchConfig>().is_err());
    }

    #[test]
    fn benchmark_rows_match_configs() {
        let configs = [
            BenchConfig::new(1, RetrievalMode::TwoStep),
            BenchConfig::new(2, RetrievalMode::Exact),
            BenchConfig::new(2, RetrievalMode::TwoStep),
        ];
        let opts = BenchOptions {
            dim: 16,
            repetitions: 1,
            ..BenchOptions::default()
        };
        let report = run_benchmark(&small(), &configs, &opts).unwrap();
        assert_eq!(report.rows.len(), 3);
        // R = 2000 covers all 30 docs, so the filter is vacuous.
        assert_eq!(report.rows[1].mrr_at_10, report.rows[2].mrr_at_10);
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
        assert!(run_benchmark(&small(), &[], &opts).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

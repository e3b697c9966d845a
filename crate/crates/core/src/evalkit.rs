//! Retrieval metrics and TREC-style judgment and run files.
//!
//! Qrels lines are `qid 0 docid rel`; run lines are `qid Q0 docid rank score tag`.
//! A document is relevant when its judged grade is at least 1. NDCG uses gain
//! `2^rel − 1` and discount `log2(rank + 1)`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::index::{RankedEntry, RankedList};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("unknown metric {0:?} (expected mrr@K, recall@K, ndcg@K or top@K)")]
    UnknownMetric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Graded relevance judgments keyed by query.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    judgments: HashMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a judgment; returns false (and leaves the first) on a duplicate pair.
    pub fn insert(&mut self, qid: impl Into<String>, doc_id: impl Into<String>, rel: u32) -> bool {
        let per_query = self.judgments.entry(qid.into()).or_default();
        match per_query.entry(doc_id.into()) {
            std::collections::hash_map::Entry::Occupied(_) => false,
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(rel);
                true
            }
        }
    }

    pub fn get(&self, qid: &str, doc_id: &str) -> Option<u32> {
        self.judgments.get(qid)?.get(doc_id).copied()
    }

    pub fn query(&self, qid: &str) -> Option<&HashMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.judgments.contains_key(qid)
    }

    pub fn num_queries(&self) -> usize {
        self.judgments.len()
    }

    /// Total number of judged pairs.
    pub fn len(&self) -> usize {
        self.judgments.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_relevant(&self, qid: &str) -> usize {
        self.query(qid).map_or(0, |m| m.values().filter(|&&r| r >= 1).count())
    }

    /// `(qid, doc_id, rel)` sorted by qid then doc_id.
    pub fn sorted_entries(&self) -> Vec<(&str, &str, u32)> {
        let mut out: Vec<_> = self
            .judgments
            .iter()
            .flat_map(|(q, docs)| docs.iter().map(move |(d, &r)| (q.as_str(), d.as_str(), r)))
            .collect();
        out.sort_unstable();
        out
    }

    /// The ranked list that orders each query's judged documents by grade.
    pub fn ideal_run(&self, qid: &str) -> RankedList {
        let mut docs: Vec<(&str, u32)> = self
            .query(qid)
            .map(|m| {
                m.iter()
                    .filter(|(_, &r)| r >= 1)
                    .map(|(d, &r)| (d.as_str(), r))
                    .collect()
            })
            .unwrap_or_default();
        docs.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        RankedList::from_ordered(qid, docs.into_iter().map(|(d, r)| (d.to_string(), r as f64)))
    }
}

/// Why a per-query value is not a plain measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalWarning {
    /// The query has no judgments at all.
    QueryNotJudged,
    /// The query has judgments but none with grade >= 1.
    NoRelevant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measured {
    pub value: f64,
    pub warning: Option<EvalWarning>,
}

impl Measured {
    fn ok(value: f64) -> Self {
        Self { value, warning: None }
    }

    fn warn(value: f64, warning: EvalWarning) -> Self {
        Self {
            value,
            warning: Some(warning),
        }
    }
}

fn relevance_warning(ranked: &RankedList, qrels: &Qrels) -> Option<EvalWarning> {
    if !qrels.contains_query(&ranked.qid) {
        Some(EvalWarning::QueryNotJudged)
    } else if qrels.num_relevant(&ranked.qid) == 0 {
        Some(EvalWarning::NoRelevant)
    } else {
        None
    }
}

fn is_relevant(qrels: &Qrels, qid: &str, doc: &RankedEntry) -> bool {
    qrels.get(qid, &doc.doc_id).is_some_and(|r| r >= 1)
}

/// Reciprocal rank of the first relevant document within the top `k`.
pub fn mrr_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Result<Measured, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let value = ranked
        .entries
        .iter()
        .take(k)
        .position(|e| is_relevant(qrels, &ranked.qid, e))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64);
    Ok(match relevance_warning(ranked, qrels) {
        Some(EvalWarning::QueryNotJudged) => Measured::warn(0.0, EvalWarning::QueryNotJudged),
        _ => Measured::ok(value),
    })
}

/// Fraction of relevant documents found in the top `k`; `None` when the query
/// has no relevant documents.
pub fn recall_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Result<Option<f64>, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let total = qrels.num_relevant(&ranked.qid);
    if total == 0 {
        return Ok(None);
    }
    let found = ranked
        .entries
        .iter()
        .take(k)
        .filter(|e| is_relevant(qrels, &ranked.qid, e))
        .count();
    Ok(Some(found as f64 / total as f64))
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, rel)| (2f64.powi(rel as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

pub fn ndcg_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Result<Measured, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if let Some(w) = relevance_warning(ranked, qrels) {
        return Ok(Measured::warn(0.0, w));
    }
    let mut ideal: Vec<u32> = qrels
        .query(&ranked.qid)
        .into_iter()
        .flat_map(|m| m.values().copied())
        .collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter().take(k));
    let actual = dcg(ranked
        .entries
        .iter()
        .take(k)
        .map(|e| qrels.get(&ranked.qid, &e.doc_id).unwrap_or(0)));
    Ok(Measured::ok(actual / idcg))
}

/// Fraction of queries with at least one relevant document in the top `k`.
pub fn topk_accuracy(ranked: &[RankedList], qrels: &Qrels, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if ranked.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let hits = ranked
        .iter()
        .filter(|r| r.entries.iter().take(k).any(|e| is_relevant(qrels, &r.qid, e)))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Mrr(usize),
    Recall(usize),
    Ndcg(usize),
    Top(usize),
}

impl std::str::FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || EvalError::UnknownMetric(s.to_string());
        let (name, k) = s.trim().split_once('@').ok_or_else(unknown)?;
        let k: usize = k.parse().map_err(|_| unknown())?;
        if k == 0 {
            return Err(EvalError::ZeroK);
        }
        match name {
            "mrr" => Ok(Metric::Mrr(k)),
            "recall" => Ok(Metric::Recall(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            "top" => Ok(Metric::Top(k)),
            _ => Err(unknown()),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Top(k) => write!(f, "top@{k}"),
        }
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>, EvalError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Per-query values and means for a set of metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    pub means: BTreeMap<String, f64>,
    /// Queries left out of each metric's mean.
    pub excluded: BTreeMap<String, usize>,
    pub warnings: BTreeMap<String, EvalWarning>,
    pub num_queries: usize,
}

impl MetricReport {
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.means.get(&metric.to_string()).copied()
    }
}

/// Evaluates every ranked list. Queries without relevant documents count as 0
/// for MRR and top-k accuracy and are excluded from recall and NDCG means.
pub fn evaluate(ranked: &[RankedList], qrels: &Qrels, metrics: &[Metric]) -> Result<MetricReport, EvalError> {
    if ranked.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut report = MetricReport {
        num_queries: ranked.len(),
        ..Default::default()
    };
    for &metric in metrics {
        let name = metric.to_string();
        let mut sum = 0.0;
        let mut counted = 0usize;
        for list in ranked {
            let value = match metric {
                Metric::Mrr(k) => Some(mrr_at_k(list, qrels, k)?.value),
                Metric::Recall(k) => recall_at_k(list, qrels, k)?,
                Metric::Ndcg(k) => {
                    let m = ndcg_at_k(list, qrels, k)?;
                    m.warning.is_none().then_some(m.value)
                }
                Metric::Top(k) => Some(topk_accuracy(std::slice::from_ref(list), qrels, k)?),
            };
            if let Some(w) = relevance_warning(list, qrels) {
                report.warnings.insert(list.qid.clone(), w);
            }
            if let Some(v) = value {
                report
                    .per_query
                    .entry(list.qid.clone())
                    .or_default()
                    .insert(name.clone(), v);
                sum += v;
                counted += 1;
            }
        }
        report.excluded.insert(name.clone(), ranked.len() - counted);
        report
            .means
            .insert(name, if counted > 0 { sum / counted as f64 } else { 0.0 });
    }
    Ok(report)
}

pub fn read_qrels(path: impl AsRef<Path>) -> Result<Qrels, EvalError> {
    parse_qrels(BufReader::new(File::open(path)?))
}

pub fn parse_qrels<R: BufRead>(reader: R) -> Result<Qrels, EvalError> {
    let mut qrels = Qrels::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |reason: String| EvalError::Parse { line: lineno, reason };
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", fields.len())));
        }
        let rel: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("relevance {:?} is not an integer", fields[3])))?;
        let rel = u32::try_from(rel).map_err(|_| parse_err(format!("relevance {rel} is negative or too large")))?;
        if !qrels.insert(fields[0], fields[2], rel) {
            return Err(parse_err(format!(
                "duplicate judgment for ({}, {})",
                fields[0], fields[2]
            )));
        }
    }
    Ok(qrels)
}

pub fn write_qrels<W: Write>(qrels: &Qrels, mut out: W) -> std::io::Result<()> {
    for (q, d, r) in qrels.sorted_entries() {
        writeln!(out, "{q} 0 {d} {r}")?;
    }
    Ok(())
}

pub fn write_run(ranked: &[RankedList], path: impl AsRef<Path>, tag: &str) -> Result<(), EvalError> {
    let mut out = BufWriter::new(File::create(path)?);
    format_run(ranked, &mut out, tag)?;
    out.flush()?;
    Ok(())
}

/// Scores use Rust's shortest round-trip float formatting.
pub fn format_run<W: Write>(ranked: &[RankedList], mut out: W, tag: &str) -> std::io::Result<()> {
    for list in ranked {
        for e in &list.entries {
            writeln!(out, "{} Q0 {} {} {} {}", list.qid, e.doc_id, e.rank, e.score, tag)?;
        }
    }
    Ok(())
}

pub fn read_run(path: impl AsRef<Path>) -> Result<Vec<RankedList>, EvalError> {
    parse_run(BufReader::new(File::open(path)?))
}

/// Groups lines by qid in order of first appearance, ordering each query's
/// entries by rank.
pub fn parse_run<R: BufRead>(reader: R) -> Result<Vec<RankedList>, EvalError> {
    let mut order: Vec<String> = Vec::new();
    let mut lists: HashMap<String, Vec<RankedEntry>> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |reason: String| EvalError::Parse { line: lineno, reason };
        if fields.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, found {}", fields.len())));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("rank {:?} is not a positive integer", fields[3])))?;
        if rank == 0 {
            return Err(parse_err("rank must be at least 1".into()));
        }
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| parse_err(format!("score {:?} is not a number", fields[4])))?;
        let qid = fields[0].to_string();
        if !lists.contains_key(&qid) {
            order.push(qid.clone());
        }
        lists.entry(qid).or_default().push(RankedEntry {
            doc_id: fields[2].to_string(),
            score,
            rank,
        });
    }
    Ok(order
        .into_iter()
        .map(|qid| {
            let mut entries = lists.remove(&qid).unwrap_or_default();
            entries.sort_by_key(|e| e.rank);
            RankedList { qid, entries }
        })
        .collect())
}

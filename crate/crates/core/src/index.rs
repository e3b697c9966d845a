//! Flat inner-product index over every centroid of every document.
//!
//! Retrieval runs in one of three modes:
//!
//! * `two_step`: scan all centroid rows once, keep each document's best inner
//!   product, take the top `R` documents by that value, then rescore those with
//!   the full softmax aggregation.
//! * `argmax_only`: rank by the best single-centroid inner product.
//! * `exact`: softmax-score every document. Slow; used as the oracle.
//!
//! Ties are broken by document ordinal (input order) everywhere.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::PseudoQuerySet;
use crate::codec::{self, FormatError, LeReader, LeWriter, FORMAT_VERSION};
use crate::matrix::{MatRef, Matrix};
use crate::scalar::{dot, Scalar};
use crate::score::{softmax_score, QueryEmbedding, ScoreError};

pub const PQEI_MAGIC: [u8; 4] = *b"PQEI";

/// Candidate multiplier applied to `k` when `R` is not given.
pub const CANDIDATES_PER_CENTROID: usize = 1000;
pub const DEFAULT_FINAL_K: usize = 1000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IndexError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("dimension mismatch: index dim {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("document {0:?} has no centroids")]
    NoCentroids(String),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    TwoStep,
    ArgmaxOnly,
    Exact,
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_step" => Ok(Self::TwoStep),
            "argmax_only" => Ok(Self::ArgmaxOnly),
            "exact" => Ok(Self::Exact),
            other => Err(format!(
                "unknown mode {other:?} (expected two_step, argmax_only or exact)"
            )),
        }
    }
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TwoStep => "two_step",
            Self::ArgmaxOnly => "argmax_only",
            Self::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Documents kept by the argmax filter.
    #[serde(rename = "R")]
    pub r: usize,
    pub final_k: usize,
    pub mode: RetrievalMode,
}

impl RetrievalConfig {
    /// Defaults for documents with `k` centroids: `R = 1000·k`, 1000 results.
    pub fn for_k(k: usize) -> Self {
        Self {
            r: CANDIDATES_PER_CENTROID * k.max(1),
            final_k: DEFAULT_FINAL_K,
            mode: RetrievalMode::TwoStep,
        }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.r == 0 {
            return Err(IndexError::InvalidConfig("R must be at least 1".into()));
        }
        if self.final_k == 0 {
            return Err(IndexError::InvalidConfig("final_k must be at least 1".into()));
        }
        if self.mode == RetrievalMode::TwoStep && self.final_k > self.r {
            return Err(IndexError::InvalidConfig(format!(
                "final_k ({}) must not exceed R ({}) in two_step mode",
                self.final_k, self.r
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Results for one query, best first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedList {
    pub qid: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Assigns ranks to already ordered `(doc_id, score)` pairs.
    pub fn from_ordered(qid: impl Into<String>, scored: impl IntoIterator<Item = (String, f64)>) -> Self {
        let entries = scored
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RankedEntry {
                doc_id,
                score,
                rank: i + 1,
            })
            .collect();
        Self {
            qid: qid.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    /// Checks ordering, rank numbering and id uniqueness.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(format!("entry {i} has rank {}", e.rank));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(format!("duplicate doc_id {:?}", e.doc_id));
            }
            if i > 0 && self.entries[i - 1].score < e.score {
                return Err(format!("score increases at rank {}", e.rank));
            }
        }
        Ok(())
    }
}

/// A document that passed the argmax filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub doc: usize,
    /// Largest inner product between the query and any of the document's centroids.
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidIndex<T = f32> {
    rows: Matrix<T>,
    row_to_doc: Vec<u32>,
    doc_ids: Vec<String>,
    doc_offsets: Vec<(usize, usize)>,
}

/// Descending score, then ascending ordinal.
fn by_score_then_ordinal(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl<T: Scalar> CentroidIndex<T> {
    pub fn build(sets: &[PseudoQuerySet<T>]) -> Result<Self, IndexError> {
        let first = sets.first().ok_or(IndexError::EmptyCorpus)?;
        let dim = first.dim();
        let mut seen = HashSet::with_capacity(sets.len());
        let total: usize = sets.iter().map(|s| s.k_effective()).sum();
        let mut data = Vec::with_capacity(total * dim);
        let mut doc_ids = Vec::with_capacity(sets.len());
        let mut lens = Vec::with_capacity(sets.len());
        for set in sets {
            if set.dim() != dim {
                return Err(IndexError::DimMismatch {
                    expected: dim,
                    actual: set.dim(),
                });
            }
            if set.k_effective() == 0 {
                return Err(IndexError::NoCentroids(set.doc_id.clone()));
            }
            if !seen.insert(set.doc_id.as_str()) {
                return Err(IndexError::DuplicateDocId(set.doc_id.clone()));
            }
            data.extend_from_slice(set.centroids.as_slice());
            doc_ids.push(set.doc_id.clone());
            lens.push(set.k_effective());
        }
        let rows = Matrix::from_vec(total, dim, data).expect("row count is the sum of k_effective");
        Ok(Self::from_parts(rows, doc_ids, &lens))
    }

    fn from_parts(rows: Matrix<T>, doc_ids: Vec<String>, lens: &[usize]) -> Self {
        let mut doc_offsets = Vec::with_capacity(lens.len());
        let mut row_to_doc = Vec::with_capacity(rows.rows());
        let mut start = 0;
        for (ord, &len) in lens.iter().enumerate() {
            doc_offsets.push((start, len));
            row_to_doc.extend(std::iter::repeat_n(ord as u32, len));
            start += len;
        }
        Self {
            rows,
            row_to_doc,
            doc_ids,
            doc_offsets,
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    /// Total centroid rows `N`.
    pub fn num_rows(&self) -> usize {
        self.rows.rows()
    }

    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn row_to_doc(&self) -> &[u32] {
        &self.row_to_doc
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    /// `(start, count)` row span of each document.
    pub fn doc_offsets(&self) -> &[(usize, usize)] {
        &self.doc_offsets
    }

    pub fn max_k(&self) -> usize {
        self.doc_offsets.iter().map(|&(_, n)| n).max().unwrap_or(0)
    }

    pub fn doc_centroids(&self, doc: usize) -> MatRef<'_, T> {
        let (start, count) = self.doc_offsets[doc];
        self.rows.view().slice_rows(start, count)
    }

    fn check_query(&self, query: &[T]) -> Result<(), IndexError> {
        if query.len() != self.dim() {
            return Err(IndexError::DimMismatch {
                expected: self.dim(),
                actual: query.len(),
            });
        }
        Ok(())
    }

    /// Per-document maximum inner product, one pass over all rows.
    pub fn best_per_doc(&self, query: &[T]) -> Result<Vec<f64>, IndexError> {
        self.check_query(query)?;
        let mut best = vec![f64::NEG_INFINITY; self.num_docs()];
        for (row, &doc) in self.rows.iter_rows().zip(&self.row_to_doc) {
            let s = dot(query, row);
            let b = &mut best[doc as usize];
            if s > *b {
                *b = s;
            }
        }
        Ok(best)
    }

    /// Top `r` documents by best single-centroid inner product, best first.
    pub fn candidate_search(&self, query: &[T], r: usize) -> Result<Vec<Candidate>, IndexError> {
        if r == 0 {
            return Err(IndexError::InvalidConfig("R must be at least 1".into()));
        }
        let best = self.best_per_doc(query)?;
        let mut keyed: Vec<(f64, usize)> = best.into_iter().enumerate().map(|(d, s)| (s, d)).collect();
        if r < keyed.len() {
            keyed.select_nth_unstable_by(r - 1, |a, b| by_score_then_ordinal(*a, *b));
            keyed.truncate(r);
        }
        keyed.sort_unstable_by(|a, b| by_score_then_ordinal(*a, *b));
        Ok(keyed.into_iter().map(|(best, doc)| Candidate { doc, best }).collect())
    }

    /// Softmax score of one document.
    pub fn doc_score(&self, query: &[T], doc: usize) -> Result<f64, IndexError> {
        Ok(softmax_score(query, self.doc_centroids(doc))?.score)
    }

    pub fn retrieve(&self, qid: &str, query: &[T], config: &RetrievalConfig) -> Result<RankedList, IndexError> {
        config.validate()?;
        self.check_query(query)?;
        let mut scored: Vec<(f64, usize)> = match config.mode {
            RetrievalMode::TwoStep => self
                .candidate_search(query, config.r)?
                .into_iter()
                .map(|c| Ok((self.doc_score(query, c.doc)?, c.doc)))
                .collect::<Result<_, IndexError>>()?,
            RetrievalMode::ArgmaxOnly => self
                .candidate_search(query, config.final_k)?
                .into_iter()
                .map(|c| (c.best, c.doc))
                .collect(),
            RetrievalMode::Exact => (0..self.num_docs())
                .map(|d| Ok((self.doc_score(query, d)?, d)))
                .collect::<Result<_, IndexError>>()?,
        };
        scored.sort_by(|a, b| by_score_then_ordinal(*a, *b));
        scored.truncate(config.final_k);
        Ok(RankedList::from_ordered(
            qid,
            scored.into_iter().map(|(s, d)| (self.doc_ids[d].clone(), s)),
        ))
    }

    /// Retrieves every query in parallel; output order follows `queries`.
    pub fn retrieve_all(
        &self,
        queries: &[QueryEmbedding<T>],
        config: &RetrievalConfig,
    ) -> Result<Vec<RankedList>, IndexError> {
        queries
            .par_iter()
            .map(|q| self.retrieve(&q.qid, &q.vector, config))
            .collect()
    }
}

pub fn build_index<T: Scalar>(sets: &[PseudoQuerySet<T>]) -> Result<CentroidIndex<T>, IndexError> {
    CentroidIndex::build(sets)
}

pub fn save_index(index: &CentroidIndex<f32>, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let file = File::create(path)?;
    save_index_to(index, BufWriter::new(file))?;
    Ok(())
}

pub fn save_index_to<W: Write>(index: &CentroidIndex<f32>, writer: W) -> Result<W, FormatError> {
    let mut w = LeWriter::new(writer);
    w.bytes(&PQEI_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(codec::to_u32(index.dim(), "dim")?)?;
    w.u64(index.num_docs() as u64)?;
    w.u64(index.num_rows() as u64)?;
    for (id, &(_, count)) in index.doc_ids.iter().zip(&index.doc_offsets) {
        w.id(id)?;
        w.u32(codec::to_u32(count, "k_effective")?)?;
    }
    codec::check_finite(index.rows.as_slice(), "index rows")?;
    w.f32s(index.rows.as_slice())?;
    Ok(w.finish()?)
}

pub fn load_index(path: impl AsRef<Path>) -> Result<CentroidIndex<f32>, FormatError> {
    let file = File::open(path).map_err(FormatError::Io)?;
    load_index_from(BufReader::new(file))
}

pub fn load_index_from<R: Read>(reader: R) -> Result<CentroidIndex<f32>, FormatError> {
    let mut r = LeReader::new(reader);
    r.magic(PQEI_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let docs = r.u64()?;
    let n = r.u64()?;
    let mut doc_ids = Vec::with_capacity(docs.min(1 << 16) as usize);
    let mut lens = Vec::with_capacity(docs.min(1 << 16) as usize);
    let mut seen = HashSet::new();
    for _ in 0..docs {
        let id = r.id()?;
        let k = r.u32()? as usize;
        if k == 0 {
            return Err(FormatError::Invalid(format!("document {id:?} has no centroids")));
        }
        if !seen.insert(id.clone()) {
            return Err(FormatError::Invalid(format!("duplicate doc_id {id:?}")));
        }
        doc_ids.push(id);
        lens.push(k);
    }
    let total: u64 = lens.iter().map(|&k| k as u64).sum();
    if total != n {
        return Err(FormatError::Invalid(format!(
            "row count {n} does not match doc table total {total}"
        )));
    }
    let values = r.f32s(n as usize * dim, "index rows")?;
    r.expect_end()?;
    let rows = Matrix::from_vec(n as usize, dim, values).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(CentroidIndex::from_parts(rows, doc_ids, &lens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::Assignment;

    fn set(id: &str, rows: &[[f64; 2]]) -> PseudoQuerySet<f64> {
        PseudoQuerySet {
            doc_id: id.to_string(),
            centroids: Matrix::from_rows(rows),
            assignment: Assignment::default(),
            iterations_run: 1,
            converged: true,
        }
    }

    fn three_docs() -> CentroidIndex<f64> {
        // Per-document max logits for query (1, 0): 2.0, 0.5, 1.0.
        CentroidIndex::build(&[
            set("a", &[[2.0, 0.0], [0.0, 1.0]]),
            set("b", &[[0.5, 0.0]]),
            set("c", &[[-1.0, 0.0], [1.0, 3.0], [0.0, 0.0]]),
        ])
        .unwrap()
    }

    #[test]
    fn layout() {
        let idx = CentroidIndex::build(&[
            set("a", &[[1.0, 0.0], [0.0, 1.0]]),
            set("b", &[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]),
        ])
        .unwrap();
        assert_eq!(idx.num_rows(), 5);
        assert_eq!(idx.doc_offsets(), &[(0, 2), (2, 3)]);
        assert_eq!(idx.row_to_doc(), &[0, 0, 1, 1, 1]);
        assert_eq!(idx.doc_centroids(1).row(2), &[3.0, 3.0]);

        let single = CentroidIndex::build(&[set("x", &[[1.0, 0.0]])]).unwrap();
        assert_eq!(single.num_rows(), 1);
    }

    #[test]
    fn build_errors() {
        assert_eq!(
            CentroidIndex::build(&[set("a", &[[1.0, 0.0]]), set("a", &[[0.0, 1.0]])]).unwrap_err(),
            IndexError::DuplicateDocId("a".into())
        );
        assert_eq!(CentroidIndex::<f64>::build(&[]).unwrap_err(), IndexError::EmptyCorpus);
    }

    #[test]
    fn candidate_search_filters_by_best_centroid() {
        let idx = three_docs();
        let c = idx.candidate_search(&[1.0, 0.0], 2).unwrap();
        assert_eq!(c, [Candidate { doc: 0, best: 2.0 }, Candidate { doc: 2, best: 1.0 }]);
        let all = idx.candidate_search(&[1.0, 0.0], 10).unwrap();
        assert_eq!(all.len(), 3);
        assert!(idx.candidate_search(&[1.0], 2).is_err());
        assert!(idx.candidate_search(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn candidate_ties_go_to_lower_ordinal() {
        let idx = CentroidIndex::build(&[
            set("a", &[[1.0, 0.0]]),
            set("b", &[[1.0, 0.0]]),
            set("c", &[[1.0, 0.0]]),
        ])
        .unwrap();
        let c = idx.candidate_search(&[1.0, 0.0], 2).unwrap();
        assert_eq!(c.iter().map(|c| c.doc).collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn default_r_is_thousand_per_centroid() {
        assert_eq!(RetrievalConfig::for_k(8).r, 8000);
        assert_eq!(RetrievalConfig::for_k(4).r, 4000);
        let bad = RetrievalConfig {
            r: 5,
            final_k: 10,
            mode: RetrievalMode::TwoStep,
        };
        assert!(bad.validate().is_err());
        let ok = RetrievalConfig {
            mode: RetrievalMode::Exact,
            ..bad
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn modes_agree_when_filter_is_vacuous() {
        let idx = three_docs();
        let q = [0.3, 0.9];
        let exact = idx
            .retrieve(
                "q",
                &q,
                &RetrievalConfig {
                    r: 3,
                    final_k: 3,
                    mode: RetrievalMode::Exact,
                },
            )
            .unwrap();
        let two = idx
            .retrieve(
                "q",
                &q,
                &RetrievalConfig {
                    r: 3,
                    final_k: 3,
                    mode: RetrievalMode::TwoStep,
                },
            )
            .unwrap();
        assert_eq!(exact, two);
        exact.check_invariants().unwrap();

        let argmax = idx
            .retrieve(
                "q",
                &[1.0, 0.0],
                &RetrievalConfig {
                    r: 3,
                    final_k: 2,
                    mode: RetrievalMode::ArgmaxOnly,
                },
            )
            .unwrap();
        assert_eq!(argmax.doc_ids().collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(argmax.entries[0].score, 2.0);
    }

    #[test]
    fn single_doc_is_rank_one_in_every_mode() {
        let idx = CentroidIndex::build(&[set("only", &[[1.0, 2.0], [0.0, 1.0]])]).unwrap();
        for mode in [RetrievalMode::TwoStep, RetrievalMode::ArgmaxOnly, RetrievalMode::Exact] {
            let list = idx
                .retrieve("q", &[0.1, -0.4], &RetrievalConfig { r: 1, final_k: 1, mode })
                .unwrap();
            assert_eq!(list.entries.len(), 1);
            assert_eq!(list.entries[0].doc_id, "only");
            assert_eq!(list.entries[0].rank, 1);
        }
    }

    #[test]
    fn pqei_round_trip_and_errors() {
        let idx = three_docs().rows().map(|v| v as f32);
        let idx = CentroidIndex::from_parts(idx, vec!["a".into(), "b".into(), "c".into()], &[2, 1, 3]);
        let bytes = save_index_to(&idx, Vec::new()).unwrap();
        assert_eq!(load_index_from(bytes.as_slice()).unwrap(), idx);
        assert!(matches!(
            load_index_from(&bytes[..bytes.len() - 1]),
            Err(FormatError::UnexpectedEof)
        ));
        let pqeb = crate::embedstub::write_embeddings_to(&[], Vec::new()).unwrap();
        let err = load_index_from(pqeb.as_slice()).unwrap_err();
        assert!(err.to_string().starts_with("bad magic"));
    }

    #[test]
    fn ranked_list_invariants() {
        let good = RankedList::from_ordered("q", [("a".to_string(), 2.0), ("b".to_string(), 1.0)]);
        assert!(good.check_invariants().is_ok());
        let bad = RankedList::from_ordered("q", [("a".to_string(), 1.0), ("b".to_string(), 2.0)]);
        assert!(bad.check_invariants().is_err());
        let dup = RankedList::from_ordered("q", [("a".to_string(), 1.0), ("a".to_string(), 1.0)]);
        assert!(dup.check_invariants().is_err());
    }
}

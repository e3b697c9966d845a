//! Per-document K-means producing pseudo query embeddings.
//!
//! Lloyd iterations over the token rows of one document, seeded with the rows
//! at equal-interval cut points. Distances are squared Euclidean. Ties go to
//! the lowest centroid index and an empty cluster keeps its previous centroid,
//! so results are a deterministic function of the input.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, FormatError, LeReader, LeWriter, FORMAT_VERSION};
use crate::embedstub::TokenEmbeddingMatrix;
use crate::matrix::{MatRef, Matrix};
use crate::scalar::{squared_distance, Scalar};

pub const PQEC_MAGIC: [u8; 4] = *b"PQEC";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClusterError {
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: rows have dim {rows}, centroids have dim {centroids}")]
    DimMismatch { rows: usize, centroids: usize },
    #[error("no centroids")]
    NoCentroids,
    #[error("no rows to cluster")]
    NoRows,
    #[error("assignment has {labels} labels for {rows} rows")]
    AssignmentLength { labels: usize, rows: usize },
    #[error("label {label} out of range for {k} clusters")]
    LabelOutOfRange { label: u32, k: usize },
    #[error("document {doc_id:?}: {source}")]
    Document {
        doc_id: String,
        #[source]
        source: Box<ClusterError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once no centroid moves further than this (L2).
    pub tol: f64,
    /// Whether the `[CLS]` row takes part in clustering.
    pub include_cls: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 8,
            max_iters: 20,
            tol: 1e-4,
            include_cls: false,
        }
    }
}

impl ClusterConfig {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.k == 0 {
            return Err(ClusterError::InvalidConfig("k must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(ClusterError::InvalidConfig("max_iters must be at least 1".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 || self.tol.is_infinite() {
            return Err(ClusterError::InvalidConfig(format!(
                "tol must be finite and >= 0, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub labels: Vec<u32>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, rows: usize, k: usize) -> Result<(), ClusterError> {
        if self.labels.len() != rows {
            return Err(ClusterError::AssignmentLength {
                labels: self.labels.len(),
                rows,
            });
        }
        match self.labels.iter().find(|&&l| l as usize >= k) {
            Some(&label) => Err(ClusterError::LabelOutOfRange { label, k }),
            None => Ok(()),
        }
    }
}

/// Cluster centroids of one document.
///
/// `assignment` labels the rows that were clustered (the `[CLS]` row is
/// excluded unless configured otherwise). Sets read back from a PQEC file
/// carry an empty assignment since the format does not store labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoQuerySet<T = f32> {
    pub doc_id: String,
    pub centroids: Matrix<T>,
    pub assignment: Assignment,
    pub iterations_run: u32,
    pub converged: bool,
}

impl<T: Scalar> PseudoQuerySet<T> {
    pub fn k_effective(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

/// Rows of `tokens` that participate in clustering.
pub fn clustering_rows<T: Scalar>(tokens: &TokenEmbeddingMatrix<T>, include_cls: bool) -> MatRef<'_, T> {
    let rows = tokens.rows().view();
    if tokens.has_cls() && !include_cls && rows.rows() > 1 {
        rows.slice_rows(1, rows.rows() - 1)
    } else {
        // A document holding only `[CLS]` clusters that row rather than nothing.
        rows
    }
}

/// Initial centroid `j` is row `floor(j * m / k)`; with fewer rows than `k`
/// every row becomes its own centroid.
pub fn equal_interval_init<T: Scalar>(rows: MatRef<'_, T>, k: usize) -> Result<Matrix<T>, ClusterError> {
    let m = rows.rows();
    if m == 0 {
        return Err(ClusterError::NoRows);
    }
    if k == 0 {
        return Err(ClusterError::InvalidConfig("k must be at least 1".into()));
    }
    let k_eff = k.min(m);
    let picks: Vec<usize> = (0..k_eff).map(|j| j * m / k_eff).collect();
    Ok(Matrix::gather(rows, &picks))
}

pub fn assign_step<T: Scalar>(rows: MatRef<'_, T>, centroids: MatRef<'_, T>) -> Result<Assignment, ClusterError> {
    if centroids.rows() == 0 {
        return Err(ClusterError::NoCentroids);
    }
    if rows.cols() != centroids.cols() {
        return Err(ClusterError::DimMismatch {
            rows: rows.cols(),
            centroids: centroids.cols(),
        });
    }
    let labels = rows
        .iter_rows()
        .map(|row| {
            let mut best = 0u32;
            let mut best_dist = f64::INFINITY;
            for (j, c) in centroids.iter_rows().enumerate() {
                let d = squared_distance(row, c);
                if d < best_dist {
                    best_dist = d;
                    best = j as u32;
                }
            }
            best
        })
        .collect();
    Ok(Assignment { labels })
}

/// Mean of the rows assigned to each cluster; empty clusters keep `previous`.
pub fn update_step<T: Scalar>(
    rows: MatRef<'_, T>,
    assignment: &Assignment,
    previous: MatRef<'_, T>,
) -> Result<Matrix<T>, ClusterError> {
    let k = previous.rows();
    let dim = previous.cols();
    if rows.cols() != dim {
        return Err(ClusterError::DimMismatch {
            rows: rows.cols(),
            centroids: dim,
        });
    }
    assignment.validate(rows.rows(), k)?;

    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (row, &label) in rows.iter_rows().zip(&assignment.labels) {
        let j = label as usize;
        counts[j] += 1;
        for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row) {
            *s += v.widen();
        }
    }
    let mut out = previous.to_owned();
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let inv = count as f64;
        for (c, s) in out.row_mut(j).iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
            *c = T::narrow(s / inv);
        }
    }
    Ok(out)
}

/// Sum over rows of the squared distance to their assigned centroid.
pub fn within_cluster_ss<T: Scalar>(rows: MatRef<'_, T>, assignment: &Assignment, centroids: MatRef<'_, T>) -> f64 {
    rows.iter_rows()
        .zip(&assignment.labels)
        .map(|(row, &l)| squared_distance(row, centroids.row(l as usize)))
        .sum()
}

/// State after one completed (assign, update) iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationView<'a, T> {
    pub iteration: usize,
    pub assignment: &'a Assignment,
    pub previous: MatRef<'a, T>,
    pub centroids: MatRef<'a, T>,
    pub max_shift: f64,
}

/// Result of clustering a bare row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOutcome<T> {
    pub centroids: Matrix<T>,
    pub assignment: Assignment,
    pub iterations_run: u32,
    pub converged: bool,
}

pub fn kmeans<T: Scalar>(rows: MatRef<'_, T>, config: &ClusterConfig) -> Result<KMeansOutcome<T>, ClusterError> {
    kmeans_observed(rows, config, |_| {})
}

/// Runs K-means, calling `observe` after every update step.
pub fn kmeans_observed<T: Scalar>(
    rows: MatRef<'_, T>,
    config: &ClusterConfig,
    mut observe: impl FnMut(IterationView<'_, T>),
) -> Result<KMeansOutcome<T>, ClusterError> {
    config.validate()?;
    let mut centroids = equal_interval_init(rows, config.k)?;
    let mut assignment: Option<Assignment> = None;
    let mut iterations_run = 0;
    let mut converged = false;

    for iteration in 1..=config.max_iters {
        let labels = assign_step(rows, centroids.view())?;
        iterations_run = iteration;
        if assignment.as_ref() == Some(&labels) {
            converged = true;
            break;
        }
        let updated = update_step(rows, &labels, centroids.view())?;
        let max_shift = centroids
            .iter_rows()
            .zip(updated.iter_rows())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        observe(IterationView {
            iteration,
            assignment: &labels,
            previous: centroids.view(),
            centroids: updated.view(),
            max_shift,
        });
        centroids = updated;
        assignment = Some(labels);
        if max_shift <= config.tol {
            converged = true;
            break;
        }
    }

    Ok(KMeansOutcome {
        centroids,
        assignment: assignment.expect("max_iters >= 1 runs at least one update"),
        iterations_run: iterations_run as u32,
        converged,
    })
}

pub fn cluster_document<T: Scalar>(
    tokens: &TokenEmbeddingMatrix<T>,
    config: &ClusterConfig,
) -> Result<PseudoQuerySet<T>, ClusterError> {
    let rows = clustering_rows(tokens, config.include_cls);
    let out = kmeans(rows, config)?;
    Ok(PseudoQuerySet {
        doc_id: tokens.doc_id().to_string(),
        centroids: out.centroids,
        assignment: out.assignment,
        iterations_run: out.iterations_run,
        converged: out.converged,
    })
}

/// Clusters every document in parallel, preserving input order. The first
/// failing document (in input order) determines the error.
pub fn cluster_corpus<T: Scalar>(
    corpus: &[TokenEmbeddingMatrix<T>],
    config: &ClusterConfig,
) -> Result<Vec<PseudoQuerySet<T>>, ClusterError> {
    config.validate()?;
    let results: Vec<_> = corpus.par_iter().map(|doc| cluster_document(doc, config)).collect();
    results
        .into_iter()
        .zip(corpus)
        .map(|(r, doc)| {
            r.map_err(|e| ClusterError::Document {
                doc_id: doc.doc_id().to_string(),
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn write_centroids(sets: &[PseudoQuerySet<f32>], path: impl AsRef<Path>) -> Result<(), FormatError> {
    let file = File::create(path)?;
    write_centroids_to(sets, BufWriter::new(file))?;
    Ok(())
}

pub fn write_centroids_to<W: Write>(sets: &[PseudoQuerySet<f32>], writer: W) -> Result<W, FormatError> {
    let dim = sets.first().map_or(0, |s| s.dim());
    let mut w = LeWriter::new(writer);
    w.bytes(&PQEC_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(codec::to_u32(dim, "dim")?)?;
    w.u64(sets.len() as u64)?;
    for set in sets {
        if set.dim() != dim {
            return Err(FormatError::DimMismatch {
                record: set.doc_id.clone(),
                expected: dim,
                actual: set.dim(),
            });
        }
        codec::check_finite(set.centroids.as_slice(), &set.doc_id)?;
        w.id(&set.doc_id)?;
        w.u32(codec::to_u32(set.k_effective(), "k_effective")?)?;
        w.u8(set.converged as u8)?;
        w.u32(set.iterations_run)?;
        w.f32s(set.centroids.as_slice())?;
    }
    Ok(w.finish()?)
}

pub fn read_centroids(path: impl AsRef<Path>) -> Result<Vec<PseudoQuerySet<f32>>, FormatError> {
    let file = File::open(path).map_err(FormatError::Io)?;
    read_centroids_from(BufReader::new(file))
}

pub fn read_centroids_from<R: Read>(reader: R) -> Result<Vec<PseudoQuerySet<f32>>, FormatError> {
    let mut r = LeReader::new(reader);
    r.magic(PQEC_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut sets = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let doc_id = r.id()?;
        let k = r.u32()? as usize;
        if k == 0 {
            return Err(FormatError::Invalid(format!("record {doc_id:?} has no centroids")));
        }
        let converged = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(FormatError::Invalid(format!(
                    "converged flag {other} in record {doc_id:?}"
                )))
            }
        };
        let iterations_run = r.u32()?;
        let values = r.f32s(k * dim, &doc_id)?;
        let centroids = Matrix::from_vec(k, dim, values).map_err(|e| FormatError::Invalid(e.to_string()))?;
        sets.push(PseudoQuerySet {
            doc_id,
            centroids,
            assignment: Assignment::default(),
            iterations_run,
            converged,
        });
    }
    r.expect_end()?;
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Matrix<f64> {
        Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    }

    fn indexed_rows(m: usize) -> Matrix<f64> {
        let rows: Vec<[f64; 1]> = (0..m).map(|i| [i as f64]).collect();
        Matrix::from_rows(&rows)
    }

    #[test]
    fn init_picks_cut_points() {
        let c = equal_interval_init(indexed_rows(4).view(), 2).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 2.0]);
        let c = equal_interval_init(indexed_rows(10).view(), 4).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 2.0, 5.0, 7.0]);
        let c = equal_interval_init(indexed_rows(1).view(), 4).unwrap();
        assert_eq!(c.as_slice(), &[0.0]);
    }

    #[test]
    fn assign_nearest_with_low_index_ties() {
        let rows = square();
        let one = Matrix::from_rows(&[[3.0, 3.0]]);
        assert_eq!(assign_step(rows.view(), one.view()).unwrap().labels, [0, 0, 0, 0]);

        let two = Matrix::from_rows(&[[0.0, 0.0], [10.0, 0.0]]);
        assert_eq!(assign_step(rows.view(), two.view()).unwrap().labels, [0, 0, 1, 1]);

        let mid = Matrix::from_rows(&[[5.0, 0.0]]);
        assert_eq!(assign_step(mid.view(), two.view()).unwrap().labels, [0]);

        let wrong = Matrix::from_rows(&[[0.0, 0.0, 0.0]]);
        assert!(matches!(
            assign_step(rows.view(), wrong.view()),
            Err(ClusterError::DimMismatch { .. })
        ));
    }

    #[test]
    fn update_takes_means_and_keeps_empty_clusters() {
        let rows = square();
        let prev = Matrix::from_rows(&[[0.0, 0.0], [10.0, 0.0]]);
        let a = Assignment {
            labels: vec![0, 0, 1, 1],
        };
        let c = update_step(rows.view(), &a, prev.view()).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 0.5, 10.0, 0.5]);

        let all_zero = Assignment { labels: vec![0; 4] };
        let c = update_step(rows.view(), &all_zero, prev.view()).unwrap();
        assert_eq!(c.row(0), &[5.0, 0.5]);
        assert_eq!(c.row(1), &[10.0, 0.0]);

        let single = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let c = update_step(single.view(), &Assignment { labels: vec![1, 0] }, prev.view()).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 4.0, 1.0, 2.0]);

        let bad = Assignment {
            labels: vec![0, 0, 2, 1],
        };
        assert!(matches!(
            update_step(rows.view(), &bad, prev.view()),
            Err(ClusterError::LabelOutOfRange { label: 2, k: 2 })
        ));
    }

    #[test]
    fn kmeans_on_two_blobs() {
        let cfg = ClusterConfig {
            k: 2,
            max_iters: 20,
            tol: 0.0,
            include_cls: false,
        };
        let out = kmeans(square().view(), &cfg).unwrap();
        assert_eq!(out.centroids.as_slice(), &[0.0, 0.5, 10.0, 0.5]);
        assert!(out.converged);
        assert!(out.iterations_run <= 3);
    }

    #[test]
    fn k_one_is_mean_and_k_m_is_identity() {
        let rows = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [5.0, 2.0]]);
        let out = kmeans(rows.view(), &ClusterConfig::with_k(1)).unwrap();
        assert_eq!(out.centroids.as_slice(), &[3.0, 1.0]);
        let out = kmeans(rows.view(), &ClusterConfig::with_k(3)).unwrap();
        assert_eq!(out.centroids, rows);
        assert_eq!(out.assignment.labels, [0, 1, 2]);
    }

    #[test]
    fn max_iters_bounds_work() {
        let cfg = ClusterConfig {
            k: 2,
            max_iters: 1,
            tol: 0.0,
            include_cls: false,
        };
        let out = kmeans(square().view(), &cfg).unwrap();
        assert_eq!(out.iterations_run, 1);
        assert!(!out.converged);
    }

    #[test]
    fn config_validation() {
        assert!(ClusterConfig::with_k(0).validate().is_err());
        let base = ClusterConfig::default();
        assert!(ClusterConfig { max_iters: 0, ..base }.validate().is_err());
        for tol in [-1.0, f64::NAN, f64::INFINITY] {
            assert!(ClusterConfig { tol, ..base }.validate().is_err());
        }
        assert!(ClusterConfig { tol: 0.0, ..base }.validate().is_ok());
    }

    #[test]
    fn cls_row_excluded_by_default() {
        let rows = Matrix::from_rows(&[[100.0f64], [1.0], [3.0]]);
        let doc = TokenEmbeddingMatrix::new("d", true, rows).unwrap();
        let pq = cluster_document(&doc, &ClusterConfig::with_k(1)).unwrap();
        assert_eq!(pq.centroids.as_slice(), &[2.0]);
        assert_eq!(pq.assignment.len(), 2);
        let cfg = ClusterConfig {
            include_cls: true,
            ..ClusterConfig::with_k(1)
        };
        let pq = cluster_document(&doc, &cfg).unwrap();
        assert!((pq.centroids.as_slice()[0] - 104.0 / 3.0).abs() < 1e-12);

        let only_cls = TokenEmbeddingMatrix::new("c", true, Matrix::from_rows(&[[7.0f64]])).unwrap();
        let pq = cluster_document(&only_cls, &ClusterConfig::with_k(4)).unwrap();
        assert_eq!(pq.k_effective(), 1);
    }

    #[test]
    fn corpus_order_determinism_and_errors() {
        let a = TokenEmbeddingMatrix::new("a", false, square()).unwrap();
        let cfg = ClusterConfig::with_k(2);
        let out = cluster_corpus(std::slice::from_ref(&a), &cfg).unwrap();
        assert_eq!(out[0].doc_id, "a");
        let out = cluster_corpus::<f64>(&[], &cfg).unwrap();
        assert!(out.is_empty());

        let a32 = a.cast::<f32>();
        let c32 =
            TokenEmbeddingMatrix::new("c", false, Matrix::from_rows(&[[1.0f32, 2.0], [2.0, 1.0], [0.0, 0.5]])).unwrap();
        let first = cluster_corpus(&[a32.clone(), c32.clone()], &cfg).unwrap();
        let second = cluster_corpus(&[a32, c32], &cfg).unwrap();
        assert_eq!(first, second);
        assert_eq!(first[1].doc_id, "c");
    }

    #[test]
    fn pqec_round_trip() {
        let doc = TokenEmbeddingMatrix::new("a", false, square().map(|v| v as f32)).unwrap();
        let sets = vec![cluster_document(&doc, &ClusterConfig::with_k(2)).unwrap()];
        let bytes = write_centroids_to(&sets, Vec::new()).unwrap();
        let back = read_centroids_from(bytes.as_slice()).unwrap();
        assert_eq!(back[0].centroids, sets[0].centroids);
        assert_eq!(back[0].iterations_run, sets[0].iterations_run);
        assert_eq!(back[0].converged, sets[0].converged);
        assert!(back[0].assignment.is_empty());
        assert!(matches!(
            crate::embedstub::read_embeddings_from(bytes.as_slice()),
            Err(FormatError::BadMagic { .. })
        ));
    }
}

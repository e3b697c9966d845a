//! Contrastive loss, closed-form score gradients and their diagnostics.
//!
//! For a query `e_q` and centroids `c_j` with logits `z_j = e_q · c_j` and
//! attention `a = softmax(z)`, the score `y = Σ_j a_j z_j` has gradient
//! `∂y/∂c_j = r(c_j) e_q` where
//!
//! ```text
//! r(c_j) = [1 + Σ_{j'≠j} a_{j'} (z_j − z_{j'})] · a_j
//! ```
//!
//! The weights sum to one. Under the in-batch softmax loss the positive
//! document's centroid gradient is `(p_pos − 1) r(c_j) e_q` with `p_pos` the
//! softmax probability of the positive. Central finite differences check both.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{clustering_rows, kmeans, ClusterConfig, ClusterError};
use crate::embedstub::TokenEmbeddingMatrix;
use crate::matrix::{MatRef, Matrix};
use crate::scalar::Scalar;
use crate::score::{logits, softmax, softmax_score, QueryEmbedding, ScoreError};

pub const MAX_FD_EPSILON: f64 = 1e-2;
pub const DEFAULT_BATCH_SIZE: usize = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GradError {
    #[error("epsilon must be in (0, {MAX_FD_EPSILON}], got {0}")]
    BadEpsilon(f64),
    #[error("batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("instance has no negatives")]
    NoNegatives,
    #[error("no instances")]
    NoInstances,
    #[error("non-finite score {0}")]
    NonFiniteScore(f64),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// One query with its positive document and the negatives it competes with.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInstance<T = f32> {
    pub query: QueryEmbedding<T>,
    pub positive: Matrix<T>,
    pub negatives: Vec<Matrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RWeights {
    pub values: Vec<f64>,
}

impl RWeights {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSample {
    pub step: usize,
    pub loss: f64,
    pub max_r: f64,
    pub var_r: f64,
}

/// `−log softmax(y)_pos` over the positive and every negative.
pub fn batch_loss<T: Scalar>(instance: &BatchInstance<T>) -> Result<f64, GradError> {
    let (scores, _) = instance_scores(instance)?;
    Ok(log_sum_exp(&scores) - scores[0])
}

fn instance_scores<T: Scalar>(instance: &BatchInstance<T>) -> Result<(Vec<f64>, f64), GradError> {
    if instance.negatives.is_empty() {
        return Err(GradError::NoNegatives);
    }
    let q = &instance.query.vector;
    let mut scores = Vec::with_capacity(1 + instance.negatives.len());
    for doc in std::iter::once(&instance.positive).chain(&instance.negatives) {
        let y = softmax_score(q, doc.view())?.score;
        if !y.is_finite() {
            return Err(GradError::NonFiniteScore(y));
        }
        scores.push(y);
    }
    let p_pos = (scores[0] - log_sum_exp(&scores)).exp();
    Ok((scores, p_pos))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gradient contribution weights, evaluated term by term as the pairwise sum.
pub fn r_weights<T: Scalar>(query: &[T], centroids: MatRef<'_, T>) -> Result<RWeights, GradError> {
    let z = logits(query, centroids)?;
    let a = softmax(&z)?;
    let values = (0..z.len())
        .map(|j| {
            let pairwise: f64 = (0..z.len())
                .filter(|&jp| jp != j)
                .map(|jp| a[jp] * (z[j] - z[jp]))
                .sum();
            (1.0 + pairwise) * a[j]
        })
        .collect();
    Ok(RWeights { values })
}

/// `∂y/∂c_j = r(c_j) e_q`, one row per centroid.
pub fn grad_score_wrt_centroids<T: Scalar>(query: &[T], centroids: MatRef<'_, T>) -> Result<Matrix<f64>, GradError> {
    let r = r_weights(query, centroids)?;
    let h = query.len();
    let mut data = Vec::with_capacity(r.values.len() * h);
    for rj in &r.values {
        data.extend(query.iter().map(|q| rj * q.widen()));
    }
    Ok(Matrix::from_vec(r.values.len(), h, data).expect("k rows of dim h"))
}

/// Gradient of `batch_loss` with respect to the positive document's centroids.
pub fn grad_loss_wrt_positive_centroids<T: Scalar>(instance: &BatchInstance<T>) -> Result<Matrix<f64>, GradError> {
    let (_, p_pos) = instance_scores(instance)?;
    let g = grad_score_wrt_centroids(&instance.query.vector, instance.positive.view())?;
    Ok(g.map(|v| (p_pos - 1.0) * v))
}

/// Largest relative error between the analytic score gradient and central
/// differences over every centroid coordinate, evaluated in `f64`. Uses the
/// fourth-order five-point stencil, so truncation error stays below rounding
/// noise at moderate `epsilon`.
pub fn finite_difference_check<T: Scalar>(
    query: &[T],
    centroids: MatRef<'_, T>,
    epsilon: f64,
) -> Result<f64, GradError> {
    if !(epsilon > 0.0 && epsilon <= MAX_FD_EPSILON) {
        return Err(GradError::BadEpsilon(epsilon));
    }
    let q: Vec<f64> = query.iter().map(|v| v.widen()).collect();
    let mut c = centroids.to_owned().map(|v| v.widen());
    let analytic = grad_score_wrt_centroids(&q, c.view())?;
    let mut worst: f64 = 0.0;
    for j in 0..c.rows() {
        for l in 0..c.cols() {
            let orig = c.row(j)[l];
            let mut at = |offset: f64| {
                c.row_mut(j)[l] = orig + offset;
                softmax_score(&q, c.view()).map(|s| s.score)
            };
            let (p1, m1, p2, m2) = (at(epsilon)?, at(-epsilon)?, at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            c.row_mut(j)[l] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let exact = analytic.row(j)[l];
            let denom = exact.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Pairs each query with every other pair's positive as its negatives.
pub fn in_batch_negatives<T: Scalar>(
    batch: &[(QueryEmbedding<T>, Matrix<T>)],
) -> Result<Vec<BatchInstance<T>>, GradError> {
    if batch.len() < 2 {
        return Err(GradError::BatchTooSmall(batch.len()));
    }
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, (query, positive))| BatchInstance {
            query: query.clone(),
            positive: positive.clone(),
            negatives: batch
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, (_, doc))| doc.clone())
                .collect(),
        })
        .collect())
}

/// Loss, `max r` and `var r` per instance, indexed by position.
pub fn run_diagnostics<T: Scalar>(instances: &[BatchInstance<T>]) -> Result<Vec<DiagnosticsSample>, GradError> {
    if instances.is_empty() {
        return Err(GradError::NoInstances);
    }
    instances
        .iter()
        .enumerate()
        .map(|(step, inst)| {
            let r = r_weights(&inst.query.vector, inst.positive.view())?;
            Ok(DiagnosticsSample {
                step,
                loss: batch_loss(inst)?,
                max_r: r.max(),
                var_r: r.variance(),
            })
        })
        .collect()
}

/// How a document is reduced to `k` vectors for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// K-means centroids.
    Centroids,
    /// The first `k` token rows.
    FirstK,
    /// `k` token rows drawn uniformly without replacement.
    RandomK,
}

impl Representation {
    pub const ALL: [Representation; 3] = [Self::Centroids, Self::FirstK, Self::RandomK];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Centroids => "centroids",
            Self::FirstK => "first_k",
            Self::RandomK => "random_k",
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centroids" => Ok(Self::Centroids),
            "first_k" => Ok(Self::FirstK),
            "random_k" => Ok(Self::RandomK),
            other => Err(format!(
                "unknown strategy {other:?} (expected centroids, first_k or random_k)"
            )),
        }
    }
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reduces a document's token rows to at most `config.k` vectors. Rows are
/// drawn from the same pool K-means clusters (`[CLS]` excluded unless
/// `config.include_cls`). `RandomK` is seeded by `seed` and the doc id.
pub fn represent<T: Scalar>(
    tokens: &TokenEmbeddingMatrix<T>,
    strategy: Representation,
    config: &ClusterConfig,
    seed: u64,
) -> Result<Matrix<T>, GradError> {
    let rows = clustering_rows(tokens, config.include_cls);
    let k = config.k.min(rows.rows());
    Ok(match strategy {
        Representation::Centroids => kmeans(rows, config)?.centroids,
        Representation::FirstK => rows.slice_rows(0, k).to_owned(),
        Representation::RandomK => {
            let doc_seed = tokens.doc_id().bytes().fold(seed ^ 0x51_7cc1_b727_220a, |h, b| {
                (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
            });
            let mut rng = ChaCha8Rng::seed_from_u64(doc_seed);
            let mut picks = sample(&mut rng, rows.rows(), k).into_vec();
            picks.sort_unstable();
            Matrix::gather(rows, &picks)
        }
    })
}

/// Runs the diagnostics for each strategy over consecutive query batches of
/// `batch_size`, each query paired with its positive document's tokens.
/// A trailing batch too small for in-batch negatives is dropped. Steps count
/// instances across batches.
pub fn diagnose_strategies<T: Scalar>(
    pairs: &[(QueryEmbedding<T>, &TokenEmbeddingMatrix<T>)],
    strategies: &[Representation],
    config: &ClusterConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(Representation, DiagnosticsSample)>, GradError> {
    if batch_size < 2 {
        return Err(GradError::BatchTooSmall(batch_size));
    }
    let mut out = Vec::new();
    for &strategy in strategies {
        let mut step = 0;
        for chunk in pairs.chunks(batch_size).filter(|c| c.len() >= 2) {
            let batch = chunk
                .iter()
                .map(|(q, doc)| Ok((q.clone(), represent(doc, strategy, config, seed)?)))
                .collect::<Result<Vec<_>, GradError>>()?;
            for mut sample in run_diagnostics(&in_batch_negatives(&batch)?)? {
                sample.step = step;
                step += 1;
                out.push((strategy, sample));
            }
        }
    }
    if out.is_empty() {
        return Err(GradError::NoInstances);
    }
    Ok(out)
}

pub fn write_diagnostics_csv<W: Write>(
    mut out: W,
    samples: &[(Representation, DiagnosticsSample)],
) -> std::io::Result<()> {
    writeln!(out, "step,loss,max_r,var_r,strategy")?;
    for (strategy, s) in samples {
        writeln!(out, "{},{},{},{},{}", s.step, s.loss, s.max_r, s.var_r, strategy)?;
    }
    Ok(())
}

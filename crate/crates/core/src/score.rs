//! Query pooling and softmax aggregation over pseudo query embeddings.
//!
//! A document with centroids `c_1..c_k` scores a query `e_q` as
//! `y = e_q · Σ_j a_j c_j` with `a = softmax(e_q · c_j)`. The argmax variant
//! keeps only the best centroid and is an upper bound on `y`, which is what
//! makes it usable as a first-stage filter. All arithmetic is `f64`.

use serde::{Deserialize, Serialize};

use crate::embedstub::TokenEmbeddingMatrix;
use crate::matrix::MatRef;
use crate::scalar::{dot, Scalar};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScoreError {
    #[error("dimension mismatch: query dim {query}, centroid dim {centroids}")]
    DimMismatch { query: usize, centroids: usize },
    #[error("no centroids")]
    Empty,
    #[error("weight count {weights} does not match centroid count {centroids}")]
    LengthMismatch { weights: usize, centroids: usize },
    #[error("non-finite logit {value} at centroid {index}")]
    NonFiniteLogit { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Row 0 (the `[CLS]` summary).
    #[default]
    FirstToken,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first_token" => Ok(Pooling::FirstToken),
            "mean" => Ok(Pooling::Mean),
            other => Err(format!("unknown pooling {other:?} (expected first_token or mean)")),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::FirstToken => "first_token",
            Pooling::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding<T = f32> {
    pub qid: String,
    pub vector: Vec<T>,
}

/// Intermediate values of one softmax score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBreakdown {
    pub weights: Vec<f64>,
    pub aggregated: Vec<f64>,
    pub score: f64,
}

pub fn pool_query<T: Scalar>(tokens: &TokenEmbeddingMatrix<T>, strategy: Pooling) -> QueryEmbedding<T> {
    let rows = tokens.rows();
    let vector = match strategy {
        Pooling::FirstToken => rows.row(0).to_vec(),
        Pooling::Mean => {
            let mut acc = vec![0.0f64; rows.cols()];
            for row in rows.iter_rows() {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.widen();
                }
            }
            let n = rows.rows() as f64;
            acc.into_iter().map(|a| T::narrow(a / n)).collect()
        }
    };
    QueryEmbedding {
        qid: tokens.doc_id().to_string(),
        vector,
    }
}

fn check_dims<T: Scalar>(query: &[T], centroids: MatRef<'_, T>) -> Result<(), ScoreError> {
    if centroids.rows() == 0 {
        return Err(ScoreError::Empty);
    }
    if query.len() != centroids.cols() {
        return Err(ScoreError::DimMismatch {
            query: query.len(),
            centroids: centroids.cols(),
        });
    }
    Ok(())
}

/// Inner products `e_q · c_j`.
pub fn logits<T: Scalar>(query: &[T], centroids: MatRef<'_, T>) -> Result<Vec<f64>, ScoreError> {
    check_dims(query, centroids)?;
    Ok(centroids.iter_rows().map(|c| dot(query, c)).collect())
}

/// Max-shifted softmax of `values`; errors on a non-finite entry.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>, ScoreError> {
    if values.is_empty() {
        return Err(ScoreError::Empty);
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(ScoreError::NonFiniteLogit { index, value });
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn attention_weights<T: Scalar>(query: &[T], centroids: MatRef<'_, T>) -> Result<Vec<f64>, ScoreError> {
    softmax(&logits(query, centroids)?)
}

/// `Σ_j w_j c_j`.
pub fn aggregate<T: Scalar>(weights: &[f64], centroids: MatRef<'_, T>) -> Result<Vec<f64>, ScoreError> {
    if weights.len() != centroids.rows() {
        return Err(ScoreError::LengthMismatch {
            weights: weights.len(),
            centroids: centroids.rows(),
        });
    }
    let mut out = vec![0.0; centroids.cols()];
    for (w, c) in weights.iter().zip(centroids.iter_rows()) {
        for (o, v) in out.iter_mut().zip(c) {
            *o += w * v.widen();
        }
    }
    Ok(out)
}

pub fn softmax_score<T: Scalar>(query: &[T], centroids: MatRef<'_, T>) -> Result<ScoreBreakdown, ScoreError> {
    let weights = attention_weights(query, centroids)?;
    let aggregated = aggregate(&weights, centroids)?;
    let score = query.iter().zip(&aggregated).map(|(q, a)| q.widen() * a).sum();
    Ok(ScoreBreakdown {
        weights,
        aggregated,
        score,
    })
}

/// Best single centroid `(j*, e_q · c_{j*})`, ties to the lowest index.
pub fn argmax_score<T: Scalar>(query: &[T], centroids: MatRef<'_, T>) -> Result<(usize, f64), ScoreError> {
    let z = logits(query, centroids)?;
    Ok(argmax(&z))
}

pub(crate) fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::matrix::Matrix;

    fn hand() -> (Vec<f64>, Matrix<f64>) {
        (vec![1.0, 0.0], Matrix::from_rows(&[[2.0, 0.0], [0.0, 2.0]]))
    }

    #[test]
    fn pooling_strategies() {
        let single = TokenEmbeddingMatrix::new("q", true, Matrix::from_rows(&[[0.3f64, -0.2]])).unwrap();
        assert_eq!(pool_query(&single, Pooling::FirstToken).vector, [0.3, -0.2]);
        assert_eq!(pool_query(&single, Pooling::Mean).vector, [0.3, -0.2]);

        let two = TokenEmbeddingMatrix::new("q", true, Matrix::from_rows(&[[1.0f64, 0.0], [0.0, 1.0]])).unwrap();
        assert_eq!(pool_query(&two, Pooling::Mean).vector, [0.5, 0.5]);
        let first = pool_query(&two, Pooling::FirstToken);
        assert_eq!(first.vector, [1.0, 0.0]);
        assert_eq!(first.qid, "q");
        assert_eq!("mean".parse::<Pooling>(), Ok(Pooling::Mean));
        assert!("max".parse::<Pooling>().is_err());
    }

    #[test]
    fn attention_examples() {
        let one = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(attention_weights(&[1.0, 1.0], one.view()).unwrap(), [1.0]);

        let eq = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        for w in attention_weights(&[0.5, 0.5], eq.view()).unwrap() {
            assert_abs_diff_eq!(w, 0.25, epsilon = 1e-15);
        }

        let (q, c) = hand();
        let w = attention_weights(&q, c.view()).unwrap();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(w[0], e2 / (e2 + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(w[0], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(w[1], 0.1192, epsilon = 1e-4);
    }

    #[test]
    fn aggregate_examples() {
        let one = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(aggregate(&[1.0], one.view()).unwrap(), [3.0, 4.0]);

        let (q, c) = hand();
        let w = attention_weights(&q, c.view()).unwrap();
        let e = aggregate(&w, c.view()).unwrap();
        assert_abs_diff_eq!(e[0], 1.7616, epsilon = 1e-4);
        assert_abs_diff_eq!(e[1], 0.2384, epsilon = 1e-4);

        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0]]);
        assert_eq!(aggregate(&[0.5, 0.5], m.view()).unwrap(), [2.0, 4.0]);
        assert!(matches!(
            aggregate(&[1.0], m.view()),
            Err(ScoreError::LengthMismatch {
                weights: 1,
                centroids: 2
            })
        ));
    }

    #[test]
    fn softmax_score_examples() {
        let one = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(softmax_score(&[0.5, -1.0], one.view()).unwrap().score, -2.5);

        let (q, c) = hand();
        let b = softmax_score(&q, c.view()).unwrap();
        assert_abs_diff_eq!(b.score, 2.0 * 2f64.exp() / (2f64.exp() + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(b.score, 1.7616, epsilon = 1e-4);

        let ortho = Matrix::from_rows(&[[0.0, 1.0], [0.0, -3.0], [0.0, 2.0]]);
        let b = softmax_score(&[1.0, 0.0], ortho.view()).unwrap();
        assert_eq!(b.score, 0.0);
        for w in b.weights {
            assert_abs_diff_eq!(w, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn argmax_examples() {
        let (q, c) = hand();
        assert_eq!(argmax_score(&q, c.view()).unwrap(), (0, 2.0));
        let one = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(argmax_score(&[1.0, 1.0], one.view()).unwrap(), (0, 7.0));
        let twins = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(argmax_score(&[1.0, 2.0], twins.view()).unwrap().0, 0);
    }

    #[test]
    fn errors() {
        let c = Matrix::from_rows(&[[1.0, 0.0]]);
        assert!(matches!(
            softmax_score(&[1.0], c.view()),
            Err(ScoreError::DimMismatch { query: 1, centroids: 2 })
        ));
        let big = Matrix::from_rows(&[[f64::MAX, 0.0]]);
        assert!(matches!(
            attention_weights(&[f64::MAX, 0.0], big.view()),
            Err(ScoreError::NonFiniteLogit { index: 0, .. })
        ));
        let empty = Matrix::<f64>::zeros(0, 2);
        assert_eq!(softmax_score(&[1.0, 0.0], empty.view()).unwrap_err(), ScoreError::Empty);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let c = Matrix::from_rows(&[[800.0], [799.0]]);
        let w = attention_weights(&[1.0], c.view()).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(w[0] + w[1], 1.0, epsilon = 1e-15);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Matrix<f64>)> {
        (1usize..8, 1usize..12).prop_flat_map(|(k, h)| {
            (
                prop::collection::vec(-3.0f64..3.0, h),
                prop::collection::vec(-3.0f64..3.0, k * h),
            )
                .prop_map(move |(q, c)| (q, Matrix::from_vec(k, h, c).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn softmax_never_exceeds_argmax((q, c) in instance()) {
            let s = softmax_score(&q, c.view()).unwrap();
            let (j, best) = argmax_score(&q, c.view()).unwrap();
            prop_assert!(s.score <= best + 1e-9);
            let sum: f64 = s.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.weights.iter().all(|w| (0.0..=1.0).contains(w)));
            let (wj, _) = argmax(&s.weights);
            prop_assert_eq!(wj, j);
        }

        #[test]
        fn score_is_permutation_invariant((q, c) in instance()) {
            let k = c.rows();
            let order: Vec<usize> = (0..k).rev().collect();
            let permuted = Matrix::gather(c.view(), &order);
            let a = softmax_score(&q, c.view()).unwrap();
            let b = softmax_score(&q, permuted.view()).unwrap();
            prop_assert!((a.score - b.score).abs() <= 1e-12 * (1.0 + a.score.abs()));
            for (i, &j) in order.iter().enumerate() {
                prop_assert!((b.weights[i] - a.weights[j]).abs() <= 1e-12);
            }
        }
    }
}

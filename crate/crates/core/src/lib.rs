//! Multi-vector dense retrieval with pseudo query embeddings.
//!
//! Each document's token embeddings are clustered with K-means and the
//! centroids stand in for the queries the document can answer. Queries are
//! scored against a document by softmax attention over its centroids; large
//! corpora are searched by filtering on the best single centroid and then
//! rescoring the survivors.
//!
//! Storage types are generic over [`Scalar`] (`f32` or `f64`); all scores and
//! gradients are accumulated in `f64`. The aliases below name the common
//! instantiations.

pub mod cluster;
pub mod codec;
pub mod embedstub;
pub mod evalkit;
pub mod graddiag;
pub mod index;
pub mod matrix;
pub mod scalar;
pub mod score;
pub mod synthbench;

pub use cluster::{cluster_corpus, cluster_document, Assignment, ClusterConfig, ClusterError, PseudoQuerySet};
pub use codec::FormatError;
pub use embedstub::{embed, embed_text, tokenize, EmbedError, Token, TokenEmbeddingMatrix};
pub use evalkit::{EvalError, Metric, MetricReport, Qrels};
pub use graddiag::{BatchInstance, DiagnosticsSample, GradError, RWeights, Representation};
pub use index::{build_index, CentroidIndex, IndexError, RankedEntry, RankedList, RetrievalConfig, RetrievalMode};
pub use matrix::{MatRef, Matrix};
pub use scalar::Scalar;
pub use score::{Pooling, QueryEmbedding, ScoreBreakdown, ScoreError};
pub use synthbench::{BenchConfig, BenchOptions, BenchReport, SynthSpec};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type TokenMatrix32 = TokenEmbeddingMatrix<f32>;
pub type TokenMatrix64 = TokenEmbeddingMatrix<f64>;
pub type PseudoQuerySet32 = PseudoQuerySet<f32>;
pub type PseudoQuerySet64 = PseudoQuerySet<f64>;
pub type CentroidIndex32 = CentroidIndex<f32>;
pub type CentroidIndex64 = CentroidIndex<f64>;
pub type QueryEmbedding32 = QueryEmbedding<f32>;
pub type QueryEmbedding64 = QueryEmbedding<f64>;

//! Deterministic stand-in encoder.
//!
//! Text is split on anything that is not alphanumeric, lowercased and prefixed
//! with a synthetic `[CLS]` token. Each token is embedded as the normalized sum
//! of seeded ±1 hash vectors for the whole word and its boundary-marked
//! character trigrams, so words that share a stem share part of their
//! embedding. Rows other than `[CLS]` carry a small positional perturbation.
//! The `[CLS]` row summarizes the whole token multiset.
//!
//! Real encoders plug in by writing PQEB files with the same layout.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{self, FormatError, LeReader, LeWriter, FORMAT_VERSION};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const CLS_TOKEN: &str = "[CLS]";
pub const DEFAULT_TOKEN_LIMIT: usize = 512;
pub const PQEB_MAGIC: [u8; 4] = *b"PQEB";

/// Euclidean norm of the positional perturbation added to non-`[CLS]` rows.
pub const POSITION_JITTER: f64 = 0.005;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EmbedError {
    #[error("empty document")]
    EmptyDocument,
    #[error("token limit must be at least 1")]
    ZeroLimit,
    #[error("dim too small: {0} (need at least 2)")]
    DimTooSmall(usize),
    #[error("no tokens to embed")]
    NoTokens,
    #[error("invalid token matrix {doc_id:?}: {reason}")]
    InvalidMatrix { doc_id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub index: usize,
}

/// Token embeddings of one document, row 0 optionally the `[CLS]` summary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingMatrix<T = f32> {
    doc_id: String,
    has_cls: bool,
    rows: Matrix<T>,
}

impl<T: Scalar> TokenEmbeddingMatrix<T> {
    pub fn new(doc_id: impl Into<String>, has_cls: bool, rows: Matrix<T>) -> Result<Self, EmbedError> {
        let doc_id = doc_id.into();
        let invalid = |reason: &str| EmbedError::InvalidMatrix {
            doc_id: doc_id.clone(),
            reason: reason.to_string(),
        };
        if rows.rows() == 0 {
            return Err(invalid("no rows"));
        }
        if rows.cols() == 0 {
            return Err(invalid("zero dim"));
        }
        if !rows.is_finite() {
            return Err(invalid("non-finite entry"));
        }
        Ok(Self { doc_id, has_cls, rows })
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn has_cls(&self) -> bool {
        self.has_cls
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Token count `m`, including the `[CLS]` row when present.
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn into_rows(self) -> Matrix<T> {
        self.rows
    }

    pub fn cast<U: Scalar>(&self) -> TokenEmbeddingMatrix<U> {
        TokenEmbeddingMatrix {
            doc_id: self.doc_id.clone(),
            has_cls: self.has_cls,
            rows: self.rows.map(|v| U::narrow(v.widen())),
        }
    }
}

/// Splits on non-alphanumeric characters, lowercases, prepends `[CLS]` and
/// keeps at most `limit` tokens in total.
pub fn tokenize(text: &str, limit: usize) -> Result<Vec<Token>, EmbedError> {
    if limit == 0 {
        return Err(EmbedError::ZeroLimit);
    }
    let mut words = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .peekable();
    if words.peek().is_none() {
        return Err(EmbedError::EmptyDocument);
    }
    let tokens = std::iter::once(CLS_TOKEN.to_string())
        .chain(words.map(str::to_lowercase))
        .take(limit)
        .enumerate()
        .map(|(index, surface)| Token { surface, index })
        .collect();
    Ok(tokens)
}

/// Embeds a token sequence. Pure function of `(tokens, dim, seed)`.
pub fn embed<T: Scalar>(
    doc_id: impl Into<String>,
    tokens: &[Token],
    dim: usize,
    seed: u64,
) -> Result<TokenEmbeddingMatrix<T>, EmbedError> {
    if dim < 2 {
        return Err(EmbedError::DimTooSmall(dim));
    }
    if tokens.is_empty() {
        return Err(EmbedError::NoTokens);
    }
    let has_cls = tokens[0].surface == CLS_TOKEN;
    let body = if has_cls { &tokens[1..] } else { tokens };

    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    for t in body {
        cache
            .entry(t.surface.as_str())
            .or_insert_with(|| word_vector(&t.surface, dim, seed));
    }

    let mut data = Vec::with_capacity(tokens.len() * dim);
    if has_cls {
        let mut summary = vec![0.0; dim];
        for t in body {
            for (s, w) in summary.iter_mut().zip(&cache[t.surface.as_str()]) {
                *s += w;
            }
        }
        if !normalize(&mut summary) {
            summary = word_vector(CLS_TOKEN, dim, seed);
        }
        data.extend(summary.into_iter().map(T::narrow));
    }
    for t in body {
        let word = &cache[t.surface.as_str()];
        let jitter = position_jitter(t.index, dim, seed);
        data.extend(word.iter().zip(&jitter).map(|(w, j)| T::narrow(w + j)));
    }
    let rows = Matrix::from_vec(tokens.len(), dim, data).expect("row count matches tokens");
    TokenEmbeddingMatrix::new(doc_id, has_cls, rows)
}

/// `tokenize` followed by `embed`.
pub fn embed_text<T: Scalar>(
    doc_id: impl Into<String>,
    text: &str,
    dim: usize,
    seed: u64,
    limit: usize,
) -> Result<TokenEmbeddingMatrix<T>, EmbedError> {
    let tokens = tokenize(text, limit)?;
    embed(doc_id, &tokens, dim, seed)
}

/// Unit-norm embedding of a single surface form.
pub fn word_vector(surface: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut add = |feature: &[u8]| {
        let mut stream = SignStream::new(fnv1a(feature) ^ mix(seed));
        for a in acc.iter_mut() {
            *a += stream.next_sign();
        }
    };
    let mut whole = Vec::with_capacity(surface.len() + 2);
    whole.extend_from_slice(b"w:");
    whole.extend_from_slice(surface.as_bytes());
    add(&whole);

    let marked: Vec<char> = std::iter::once('<')
        .chain(surface.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut gram = String::new();
    for window in marked.windows(3) {
        gram.clear();
        gram.push_str("g:");
        gram.extend(window);
        add(gram.as_bytes());
    }
    if !normalize(&mut acc) {
        // Only reachable if every feature cancels; fall back to a fixed axis.
        acc[0] = 1.0;
    }
    acc
}

fn position_jitter(index: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut stream = SignStream::new(mix(index as u64 ^ 0x9e37_79b9_7f4a_7c15) ^ mix(seed.wrapping_add(1)));
    let scale = POSITION_JITTER / (dim as f64).sqrt();
    (0..dim).map(|_| stream.next_sign() * scale).collect()
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct SignStream {
    state: u64,
    bits: u64,
    left: u32,
}

impl SignStream {
    fn new(state: u64) -> Self {
        Self {
            state,
            bits: 0,
            left: 0,
        }
    }

    fn next_sign(&mut self) -> f64 {
        if self.left == 0 {
            self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
            self.bits = mix(self.state);
            self.left = 64;
        }
        let bit = self.bits & 1;
        self.bits >>= 1;
        self.left -= 1;
        if bit == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Writes a corpus in PQEB v1. All records must share one dim.
pub fn write_embeddings(corpus: &[TokenEmbeddingMatrix<f32>], path: impl AsRef<Path>) -> Result<(), FormatError> {
    let file = File::create(path)?;
    write_embeddings_to(corpus, BufWriter::new(file))?;
    Ok(())
}

pub fn write_embeddings_to<W: Write>(corpus: &[TokenEmbeddingMatrix<f32>], writer: W) -> Result<W, FormatError> {
    let dim = corpus.first().map_or(0, |d| d.dim());
    let mut w = LeWriter::new(writer);
    w.bytes(&PQEB_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(codec::to_u32(dim, "dim")?)?;
    w.u64(corpus.len() as u64)?;
    for doc in corpus {
        if doc.dim() != dim {
            return Err(FormatError::DimMismatch {
                record: doc.doc_id.clone(),
                expected: dim,
                actual: doc.dim(),
            });
        }
        codec::check_finite(doc.rows.as_slice(), &doc.doc_id)?;
        w.id(&doc.doc_id)?;
        w.u32(codec::to_u32(doc.len(), "token count")?)?;
        w.u8(doc.has_cls as u8)?;
        w.f32s(doc.rows.as_slice())?;
    }
    Ok(w.finish()?)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<TokenEmbeddingMatrix<f32>>, FormatError> {
    let file = File::open(path).map_err(FormatError::Io)?;
    read_embeddings_from(BufReader::new(file))
}

pub fn read_embeddings_from<R: Read>(reader: R) -> Result<Vec<TokenEmbeddingMatrix<f32>>, FormatError> {
    let mut r = LeReader::new(reader);
    r.magic(PQEB_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let mut corpus = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let doc_id = r.id()?;
        let m = r.u32()? as usize;
        let has_cls = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(FormatError::Invalid(format!(
                    "has_cls flag {other} in record {doc_id:?}"
                )))
            }
        };
        let values = r.f32s(m * dim, &doc_id)?;
        let rows = Matrix::from_vec(m, dim, values).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let doc = TokenEmbeddingMatrix::new(doc_id, has_cls, rows).map_err(|e| FormatError::Invalid(e.to_string()))?;
        corpus.push(doc);
    }
    r.expect_end()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surfaces(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    #[test]
    fn tokenize_splits_and_lowercases() {
        let t = tokenize("Hello, world", 512).unwrap();
        assert_eq!(surfaces(&t), ["[CLS]", "hello", "world"]);
        assert_eq!(t[2].index, 2);
    }

    #[test]
    fn tokenize_counts_cls_against_limit() {
        let text: Vec<String> = (0..511).map(|i| format!("w{i}")).collect();
        let t = tokenize(&text.join(" "), 512).unwrap();
        assert_eq!(t.len(), 512);
        let t = tokenize("a a a", 2).unwrap();
        assert_eq!(surfaces(&t), ["[CLS]", "a"]);
    }

    #[test]
    fn tokenize_errors() {
        assert_eq!(tokenize("  ,.;  ", 10), Err(EmbedError::EmptyDocument));
        assert_eq!(tokenize("", 10), Err(EmbedError::EmptyDocument));
        assert_eq!(tokenize("x", 0), Err(EmbedError::ZeroLimit));
    }

    #[test]
    fn embed_is_deterministic_and_normalized() {
        let tokens = tokenize("x", 512).unwrap();
        let a = embed::<f32>("d", &tokens, 16, 7).unwrap();
        let b = embed::<f32>("d", &tokens, 16, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.has_cls());
        for row in a.rows().iter_rows() {
            let n = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((0.99..=1.01).contains(&n), "norm {n}");
        }
    }

    #[test]
    fn embed_rejects_small_dim_and_empty_input() {
        let tokens = tokenize("x", 512).unwrap();
        assert_eq!(
            embed::<f32>("d", &tokens, 1, 0).unwrap_err(),
            EmbedError::DimTooSmall(1)
        );
        assert_eq!(embed::<f32>("d", &[], 8, 0).unwrap_err(), EmbedError::NoTokens);
    }

    #[test]
    fn repeated_words_share_embeddings_up_to_jitter() {
        let m = embed_text::<f64>("d", "alpha beta alpha", 64, 3, 512).unwrap();
        let r1 = m.rows().row(1);
        let r3 = m.rows().row(3);
        let diff = r1.iter().zip(r3).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 2.0 * POSITION_JITTER + 1e-12);
        assert!(diff > 0.0);
    }

    #[test]
    fn cls_row_is_unperturbed_multiset_summary() {
        let a = embed_text::<f64>("a", "red green red", 32, 1, 512).unwrap();
        let b = embed_text::<f64>("b", "green red red", 32, 1, 512).unwrap();
        assert_eq!(a.rows().row(0), b.rows().row(0));
    }

    #[test]
    fn disjoint_vocabularies_are_nearly_orthogonal() {
        let a = embed_text::<f64>("a", "apple banana cherry grape lemon mango", 64, 1, 512).unwrap();
        let b = embed_text::<f64>("b", "tractor engine piston wrench bolt gasket", 64, 1, 512).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for ra in a.rows().iter_rows().skip(1) {
            for rb in b.rows().iter_rows().skip(1) {
                sum += crate::scalar::dot(ra, rb);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean < 0.5, "mean inner product {mean}");
    }

    #[test]
    fn pqeb_round_trip_and_errors() {
        let corpus: Vec<TokenEmbeddingMatrix<f32>> = ["one two", "three four five", "six"]
            .iter()
            .enumerate()
            .map(|(i, t)| embed_text(format!("d{i}"), t, 8, 9, 512).unwrap())
            .collect();
        let bytes = write_embeddings_to(&corpus, Vec::new()).unwrap();
        let back = read_embeddings_from(bytes.as_slice()).unwrap();
        assert_eq!(back, corpus);

        let empty = write_embeddings_to(&[], Vec::new()).unwrap();
        assert!(read_embeddings_from(empty.as_slice()).unwrap().is_empty());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_embeddings_from(bad.as_slice()),
            Err(FormatError::BadMagic { .. })
        ));
        assert_eq!(
            read_embeddings_from(bad.as_slice())
                .unwrap_err()
                .to_string()
                .split(':')
                .next(),
            Some("bad magic")
        );

        let mut future = bytes.clone();
        future[4] = 2;
        assert!(matches!(
            read_embeddings_from(future.as_slice()),
            Err(FormatError::UnsupportedVersion(2))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            read_embeddings_from(truncated),
            Err(FormatError::UnexpectedEof)
        ));

        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_embeddings_from(nan.as_slice()),
            Err(FormatError::NonFinite { .. })
        ));
    }

    #[test]
    fn writer_rejects_mixed_dims() {
        let a = embed_text::<f32>("a", "x", 8, 0, 512).unwrap();
        let b = embed_text::<f32>("b", "x", 16, 0, 512).unwrap();
        assert!(matches!(
            write_embeddings_to(&[a, b], Vec::new()),
            Err(FormatError::DimMismatch { .. })
        ));
    }
}

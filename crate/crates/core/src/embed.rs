//! Output-embedding matrix storage and the vector operations the penalties need.
//!
//! Matrices are stored in the `TPEMB1` format: the 7-byte magic `"TPEMB1\n"`,
//! `rows` and `dim` as little-endian `u32`, then `rows * dim` little-endian
//! `f32` values in row-major order. Nothing follows the payload.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tokenizer::TokenId;

pub const MAGIC: &[u8; 7] = b"TPEMB1\n";
const HEADER_LEN: usize = MAGIC.len() + 8;

#[derive(Error, Debug)]
pub enum EmbedError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not a TPEMB1 file")]
    BadMagic,
    #[error("truncated embedding file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("embedding file has {0} trailing bytes after the payload")]
    TrailingBytes(usize),
    #[error("embedding dimension must be at least 1")]
    ZeroDim,
    #[error("non-finite embedding entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("token id {id} out of range for {rows} embedding rows")]
    InvalidId { id: TokenId, rows: usize },
    #[error("unused-token set is empty; supply an explicit list of unused token ids")]
    EmptyUnusedSet,
    #[error("unused-token list line {line}: {content:?} is not a token id")]
    MalformedUnusedList { line: usize, content: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        if data.len() != rows * dim {
            return Err(EmbedError::Truncated {
                expected: rows * dim,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite {
                row: i / dim,
                col: i % dim,
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, EmbedError> {
        let dim = rows.first().map_or(0, Vec::len);
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: TokenId) -> Option<&[f32]> {
        let i = id as usize;
        (i < self.rows).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        if bytes.len() < MAGIC.len() {
            return Err(EmbedError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(EmbedError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(EmbedError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (rows, dim) = (word(7), word(11));
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        let expected = HEADER_LEN + rows * dim * 4;
        match bytes.len() {
            n if n < expected => Err(EmbedError::Truncated {
                expected,
                actual: n,
            }),
            n if n > expected => Err(EmbedError::TrailingBytes(n - expected)),
            _ => {
                let data = bytes[HEADER_LEN..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Self::new(rows, dim, data)
            }
        }
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbedError> {
    let bytes = fs::read(path).map_err(|source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    })?;
    EmbeddingMatrix::from_bytes(&bytes)
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<(), EmbedError> {
    fs::write(path, m.to_bytes()).map_err(|source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    })
}

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);

/// How many cosine distances so far involved a zero-norm vector.
pub fn zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.load(Ordering::Relaxed)
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`. A zero-norm operand yields 1.
///
/// Panics if the lengths differ.
pub fn cosine_distance<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    assert_eq!(a.len(), b.len(), "cosine_distance on vectors of different length");
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

/// Token ids treated as unused, with the mean of their embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct UnusedTokenSet {
    ids: Vec<TokenId>,
    mean: Vec<f64>,
}

impl UnusedTokenSet {
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn mean_vector(&self) -> &[f64] {
        &self.mean
    }
}

/// Builds the unused set from `declared` ids when given (even if `corpus_ids`
/// is also supplied); otherwise from every id never seen in `corpus_ids`.
pub fn unused_token_set(
    embeddings: &EmbeddingMatrix,
    declared: Option<&[TokenId]>,
    corpus_ids: Option<&HashSet<TokenId>>,
) -> Result<UnusedTokenSet, EmbedError> {
    let mut ids: Vec<TokenId> = match (declared, corpus_ids) {
        (Some(d), _) if !d.is_empty() => d.to_vec(),
        (_, Some(seen)) => (0..embeddings.rows() as TokenId)
            .filter(|id| !seen.contains(id))
            .collect(),
        _ => Vec::new(),
    };
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(EmbedError::EmptyUnusedSet);
    }
    let mut mean = vec![0.0f64; embeddings.dim()];
    for &id in &ids {
        let row = embeddings.row(id).ok_or(EmbedError::InvalidId {
            id,
            rows: embeddings.rows(),
        })?;
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    let n = ids.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(UnusedTokenSet { ids, mean })
}

/// Reads an unused-token list: one id per line; blank lines and `#` comments
/// are ignored.
pub fn load_unused_list(path: &Path) -> Result<Vec<TokenId>, EmbedError> {
    let content = fs::read_to_string(path).map_err(|source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    })?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| EmbedError::MalformedUnusedList {
                    line: i + 1,
                    content: l.to_string(),
                })
        })
        .collect()
}

//! Isolation Forest anomaly scores over embedding rows.
//!
//! Each tree is grown on a subsample of `ψ` rows drawn without replacement,
//! splitting on a uniformly chosen non-constant feature at a threshold drawn
//! uniformly inside that feature's open range, until the height limit
//! `ceil(log2 ψ)` or a single row remains. A point's path length adds the
//! expected unsuccessful-search depth `c(m)` at a size-`m` leaf; the score is
//! `2^(-E[h(x)] / c(ψ))`.
//!
//! Tree `i` draws from a ChaCha8 stream `i` keyed by the forest seed, so fitting
//! in parallel gives the same forest as fitting sequentially.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingMatrix;

pub const EULER_GAMMA: f64 = 0.5772156649;

#[derive(Error, Debug)]
pub enum ForestError {
    #[error("subsample size {psi} exceeds the {rows} available rows")]
    SubsampleTooLarge { psi: usize, rows: usize },
    #[error("subsample size must be at least 2, got {0}")]
    SubsampleTooSmall(usize),
    #[error("tree count must be at least 1")]
    NoTrees,
    #[error("point has dimension {got}, forest was fit on {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cannot access score cache {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("score cache line {line}: {message}")]
    MalformedCache { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub subsample: usize,
    pub trees: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            subsample: 256,
            trees: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

/// Arena-allocated tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    nodes: Vec<Node>,
}

impl IsolationTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn path_length(&self, x: &[f32]) -> f64 {
        let mut i = 0;
        let mut edges = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { size } => return edges as f64 + average_path_length(size),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if (x[feature] as f64) < threshold { left } else { right };
                    edges += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<IsolationTree>,
    params: ForestParams,
    dim: usize,
}

/// `c(n)`: average path length of an unsuccessful search in a binary search
/// tree of `n` nodes.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

pub fn height_limit(psi: usize) -> usize {
    // ceil(log2 psi) for psi >= 2
    (usize::BITS - (psi - 1).leading_zeros()) as usize
}

pub fn fit(embeddings: &EmbeddingMatrix, params: ForestParams) -> Result<ForestModel, ForestError> {
    let rows = embeddings.rows();
    if params.subsample < 2 {
        return Err(ForestError::SubsampleTooSmall(params.subsample));
    }
    if params.subsample > rows {
        return Err(ForestError::SubsampleTooLarge {
            psi: params.subsample,
            rows,
        });
    }
    if params.trees == 0 {
        return Err(ForestError::NoTrees);
    }
    let limit = height_limit(params.subsample);
    let trees = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            let mut sample = subsample(rows, params.subsample, &mut rng);
            let mut nodes = Vec::new();
            grow(embeddings, &mut sample, 0, limit, &mut rng, &mut nodes);
            IsolationTree { nodes }
        })
        .collect();
    Ok(ForestModel {
        trees,
        params,
        dim: embeddings.dim(),
    })
}

/// Partial Fisher-Yates: the first `k` slots of a shuffled `0..n`.
fn subsample(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

fn feature_range(emb: &EmbeddingMatrix, rows: &[usize], f: usize) -> (f32, f32) {
    rows.iter()
        .map(|&r| emb.row(r as u32).expect("sampled row in range")[f])
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn grow(
    emb: &EmbeddingMatrix,
    rows: &mut [usize],
    depth: usize,
    limit: usize,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
) -> usize {
    let me = nodes.len();
    nodes.push(Node::Leaf { size: rows.len() });
    if depth >= limit || rows.len() <= 1 {
        return me;
    }

    // Uniform over non-constant features: accept a uniform draw if it varies,
    // otherwise pick uniformly among the varying ones.
    let dim = emb.dim();
    let first = rng.random_range(0..dim);
    let (feature, (lo, hi)) = {
        let r = feature_range(emb, rows, first);
        if r.0 < r.1 {
            (first, r)
        } else {
            let varying: Vec<(usize, (f32, f32))> = (0..dim)
                .map(|f| (f, feature_range(emb, rows, f)))
                .filter(|(_, (lo, hi))| lo < hi)
                .collect();
            if varying.is_empty() {
                return me;
            }
            varying[rng.random_range(0..varying.len())]
        }
    };

    let (lo, hi) = (lo as f64, hi as f64);
    let threshold = loop {
        let t = rng.random_range(lo..hi);
        if t > lo {
            break t;
        }
    };

    let mut split = 0;
    for i in 0..rows.len() {
        if (emb.row(rows[i] as u32).unwrap()[feature] as f64) < threshold {
            rows.swap(i, split);
            split += 1;
        }
    }
    let (l, r) = rows.split_at_mut(split);
    let left = grow(emb, l, depth + 1, limit, rng, nodes);
    let right = grow(emb, r, depth + 1, limit, rng, nodes);
    nodes[me] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    me
}

impl ForestModel {
    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn params(&self) -> ForestParams {
        self.params
    }

    pub fn mean_path_length(&self, x: &[f32]) -> Result<f64, ForestError> {
        if x.len() != self.dim {
            return Err(ForestError::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        Ok(total / self.trees.len() as f64)
    }

    pub fn score(&self, x: &[f32]) -> Result<f64, ForestError> {
        let h = self.mean_path_length(x)?;
        Ok(score_from_path_length(h, self.params.subsample))
    }
}

pub fn score_from_path_length(mean_path: f64, psi: usize) -> f64 {
    2f64.powf(-mean_path / average_path_length(psi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScores {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl AnomalyScores {
    /// Min-max rescales `raw` to `[0, 1]`; all zeros when every score is equal.
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let normalized = if hi > lo {
            raw.iter().map(|s| (s - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self { raw, normalized }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

pub fn score_vocabulary(model: &ForestModel, embeddings: &EmbeddingMatrix) -> AnomalyScores {
    let raw = (0..embeddings.rows())
        .into_par_iter()
        .map(|i| {
            model
                .score(embeddings.row(i as u32).unwrap())
                .expect("forest was fit on this matrix's dimension")
        })
        .collect();
    AnomalyScores::from_raw(raw)
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    id: usize,
    raw: f64,
    norm: f64,
}

pub fn write_score_cache(path: &Path, scores: &AnomalyScores) -> Result<(), ForestError> {
    let io = |source| ForestError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for (id, (&raw, &norm)) in scores.raw.iter().zip(&scores.normalized).enumerate() {
        let line = serde_json::to_string(&CacheLine { id, raw, norm }).expect("plain struct");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_score_cache(path: &Path) -> Result<AnomalyScores, ForestError> {
    let io = |source| ForestError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut raw = Vec::new();
    let mut normalized = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CacheLine =
            serde_json::from_str(&line).map_err(|e| ForestError::MalformedCache {
                line: i + 1,
                message: e.to_string(),
            })?;
        if entry.id != raw.len() {
            return Err(ForestError::MalformedCache {
                line: i + 1,
                message: format!("expected id {}, found {}", raw.len(), entry.id),
            });
        }
        raw.push(entry.raw);
        normalized.push(entry.norm);
    }
    Ok(AnomalyScores { raw, normalized })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn blob(n: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..2)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        v as f32
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn c_of_n() {
        // 2 * (ln 255 + gamma) - 2 * 255 / 256
        let expected = 2.0 * (255f64.ln() + EULER_GAMMA) - 2.0 * 255.0 / 256.0;
        assert_eq!(average_path_length(256), expected);
        assert!((average_path_length(256) - 10.244770920116851).abs() < 1e-12);
        assert_eq!(average_path_length(2), 1.0);
        assert_eq!(average_path_length(1), 0.0);
    }

    #[test]
    fn height_limits() {
        assert_eq!(height_limit(256), 8);
        assert_eq!(height_limit(255), 8);
        assert_eq!(height_limit(257), 9);
        assert_eq!(height_limit(2), 1);
    }

    #[test]
    fn average_depth_equal_to_c_psi_scores_half() {
        assert_eq!(score_from_path_length(average_path_length(256), 256), 0.5);
    }

    #[test]
    fn fit_is_deterministic() {
        let m = EmbeddingMatrix::from_rows(&blob(1000, 3)).unwrap();
        let p = ForestParams {
            subsample: 256,
            trees: 100,
            seed: 1,
        };
        let a = fit(&m, p).unwrap();
        let b = fit(&m, p).unwrap();
        assert_eq!(a, b);
        let limit = height_limit(256);
        assert!(a.trees().iter().all(|t| t.depth() <= limit));
        let sa = score_vocabulary(&a, &m);
        let sb = score_vocabulary(&b, &m);
        let bits = |s: &AnomalyScores| s.raw.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&sa), bits(&sb));
    }

    #[test]
    fn constant_data_gives_single_leaves() {
        let m = EmbeddingMatrix::from_rows(&vec![vec![1.5f32, -2.0]; 300]).unwrap();
        let f = fit(
            &m,
            ForestParams {
                subsample: 256,
                trees: 10,
                seed: 7,
            },
        )
        .unwrap();
        for t in f.trees() {
            assert_eq!(t.nodes(), &[Node::Leaf { size: 256 }]);
        }
    }

    #[test]
    fn parameter_errors() {
        let m = EmbeddingMatrix::from_rows(&blob(1000, 1)).unwrap();
        let p = ForestParams {
            subsample: 2000,
            trees: 100,
            seed: 1,
        };
        assert!(matches!(fit(&m, p), Err(ForestError::SubsampleTooLarge { psi: 2000, rows: 1000 })));
        let f = fit(&m, ForestParams::default()).unwrap();
        assert!(matches!(f.score(&[0.0]), Err(ForestError::DimMismatch { .. })));
    }

    #[test]
    fn thresholds_lie_strictly_inside_sample_range() {
        let pts = blob(300, 11);
        let m = EmbeddingMatrix::from_rows(&pts).unwrap();
        let f = fit(&m, ForestParams { subsample: 64, trees: 20, seed: 5 }).unwrap();
        for t in f.trees() {
            for n in t.nodes() {
                if let Node::Split { feature, threshold, .. } = n {
                    let lo = pts.iter().map(|p| p[*feature]).fold(f32::INFINITY, f32::min) as f64;
                    let hi = pts.iter().map(|p| p[*feature]).fold(f32::NEG_INFINITY, f32::max) as f64;
                    assert!(*threshold > lo && *threshold < hi);
                }
            }
        }
    }

    #[test]
    fn scores_in_unit_interval_and_monotone() {
        let m = EmbeddingMatrix::from_rows(&blob(500, 2)).unwrap();
        let f = fit(&m, ForestParams::default()).unwrap();
        let s = score_vocabulary(&f, &m);
        assert!(s.raw.iter().all(|&v| v > 0.0 && v < 1.0));
        let mut by_path: Vec<(f64, f64)> = m
            .iter_rows()
            .map(|r| (f.mean_path_length(r).unwrap(), f.score(r).unwrap()))
            .collect();
        by_path.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in by_path.windows(2) {
            if w[0].0 < w[1].0 {
                assert!(w[0].1 > w[1].1);
            }
        }
    }

    #[test]
    fn moving_outlier_away_never_lowers_its_score() {
        let base = blob(499, 9);
        let mut last = 0.0;
        for d in [4.0f32, 16.0, 64.0] {
            let mut pts = base.clone();
            pts.push(vec![d, d]);
            let m = EmbeddingMatrix::from_rows(&pts).unwrap();
            let f = fit(&m, ForestParams { seed: 4, ..ForestParams::default() }).unwrap();
            let s = f.score(&[d, d]).unwrap();
            assert!(s >= last, "score {s} at distance {d} below {last}");
            last = s;
        }
    }

    #[test]
    fn normalization() {
        let s = AnomalyScores::from_raw(vec![0.4, 0.6, 0.5]);
        let expect = [0.0, 1.0, 0.5];
        for (a, b) in s.normalized.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(AnomalyScores::from_raw(vec![0.5; 3]).normalized, vec![0.0; 3]);
        assert_eq!(AnomalyScores::from_raw(vec![0.7]).normalized, vec![0.0]);
    }

    #[test]
    fn cache_round_trip() {
        let s = AnomalyScores::from_raw(vec![0.41, 0.63, 0.5]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_score_cache(f.path(), &s).unwrap();
        assert_eq!(load_score_cache(f.path()).unwrap(), s);
    }
}

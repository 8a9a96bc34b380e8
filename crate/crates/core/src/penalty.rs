//! Per-word tokenization penalties, their per-instance aggregates, the two
//! counting baselines and perplexity.
//!
//! Only split words (k >= 2 tokens) carry a penalty. Four functions are
//! provided:
//!
//! * `AS`: mean Isolation-Forest anomaly score of the word's tokens.
//! * `UT`: mean cosine similarity of the tokens to the mean unused-token
//!   embedding.
//! * `PD`: mean cosine distance between consecutive tokens.
//! * `CP`: `(wt / k) * sum(1 - p_i)` over the tokens' next-token
//!   probabilities, where `wt` is a POS weight.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::{effective_words, CorpusError, InstanceRecord, NaturalWord};
use crate::embed::{cosine_distance, EmbeddingMatrix, UnusedTokenSet};
use crate::logprob::{probability_at, FirstTokenPolicy, LogProbError, LogProbSequence};
use crate::tokenizer::{align, TokenId, TokenSpan, Tokenizer, TokenizerError, WordTokenization};

pub const DEFAULT_TOP_K: usize = 3;

/// UPOS tags weighted 2 in `CP`.
pub const CONTENT_POS: [&str; 4] = ["VERB", "NOUN", "ADJ", "ADV"];

#[derive(Error, Debug)]
pub enum PenaltyError {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    LogProb(#[from] LogProbError),
    #[error("no anomaly score for token {0}")]
    MissingScore(TokenId),
    #[error("no embedding row for token {0}")]
    MissingEmbedding(TokenId),
    #[error("asset mismatch: vocabulary has {vocab} entries but {asset} has {rows}")]
    AssetMismatch {
        asset: &'static str,
        vocab: usize,
        rows: usize,
    },
    #[error("unused-token mean has dimension {got}, embeddings have {expected}")]
    UnusedDimMismatch { expected: usize, got: usize },
    #[error("perplexity needs at least one present log-prob")]
    NoLogProbs,
    #[error("no log-prob sequence for instance (key {0:?})")]
    MissingSequence(String),
    #[error("top_k needs K >= 1")]
    ZeroK,
    #[error("unknown penalty function {0:?}")]
    UnknownFunction(String),
    #[error("unknown aggregation {0:?}")]
    UnknownAggregation(String),
    #[error("instance {id:?}: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<PenaltyError>,
    },
    #[error("cannot access penalty dump {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("penalty dump line {line}: {message}")]
    MalformedDump { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PenaltyFunction {
    AS,
    UT,
    PD,
    CP,
}

impl PenaltyFunction {
    pub const ALL: [PenaltyFunction; 4] = [Self::AS, Self::UT, Self::PD, Self::CP];

    pub fn name(self) -> &'static str {
        match self {
            Self::AS => "AS",
            Self::UT => "UT",
            Self::PD => "PD",
            Self::CP => "CP",
        }
    }
}

impl fmt::Display for PenaltyFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PenaltyFunction {
    type Err = PenaltyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| PenaltyError::UnknownFunction(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
    TopK(usize),
}

impl Aggregation {
    /// Column suffix: `sum`, `avg`, `max`, `top3`, ...
    pub fn name(self) -> String {
        match self {
            Self::Sum => "sum".into(),
            Self::Mean => "avg".into(),
            Self::Max => "max".into(),
            Self::TopK(k) => format!("top{k}"),
        }
    }

    pub fn defaults() -> Vec<Aggregation> {
        vec![Self::Sum, Self::Mean, Self::Max, Self::TopK(DEFAULT_TOP_K)]
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Aggregation {
    type Err = PenaltyError;

    /// Accepts `sum`, `avg`/`mean`, `max`, `topK` (e.g. `top3`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "sum" => Ok(Self::Sum),
            "avg" | "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            _ => {
                let k: usize = lower
                    .strip_prefix("top")
                    .and_then(|d| d.strip_prefix('_').or(Some(d)))
                    .and_then(|d| d.parse().ok())
                    .ok_or_else(|| PenaltyError::UnknownAggregation(s.to_string()))?;
                if k == 0 {
                    return Err(PenaltyError::ZeroK);
                }
                Ok(Self::TopK(k))
            }
        }
    }
}

impl Serialize for Aggregation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for Aggregation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Dump column name for a function/aggregation pair, e.g. `CP_top3`.
pub fn column_name(f: PenaltyFunction, agg: Aggregation) -> String {
    format!("{}_{}", f.name(), agg.name())
}

pub fn pos_weight(pos: Option<&str>, weighting: bool) -> f64 {
    match pos {
        Some(p) if weighting && CONTENT_POS.contains(&p) => 2.0,
        _ => 1.0,
    }
}

pub fn penalty_as(tokens: &[TokenSpan], scores: &[f64]) -> Result<f64, PenaltyError> {
    let mut sum = 0.0;
    for t in tokens {
        sum += *scores
            .get(t.token_id as usize)
            .ok_or(PenaltyError::MissingScore(t.token_id))?;
    }
    Ok(sum / tokens.len() as f64)
}

fn embedding(emb: &EmbeddingMatrix, id: TokenId) -> Result<&[f32], PenaltyError> {
    emb.row(id).ok_or(PenaltyError::MissingEmbedding(id))
}

pub fn penalty_ut(
    tokens: &[TokenSpan],
    emb: &EmbeddingMatrix,
    unused: &UnusedTokenSet,
) -> Result<f64, PenaltyError> {
    let u = unused.mean_vector();
    let mut sum = 0.0;
    for t in tokens {
        sum += 1.0 - cosine_distance(embedding(emb, t.token_id)?, u);
    }
    Ok(sum / tokens.len() as f64)
}

pub fn penalty_pd(tokens: &[TokenSpan], emb: &EmbeddingMatrix) -> Result<f64, PenaltyError> {
    if tokens.len() < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for pair in tokens.windows(2) {
        sum += cosine_distance(
            embedding(emb, pair[0].token_id)?,
            embedding(emb, pair[1].token_id)?,
        );
    }
    Ok(sum / (tokens.len() - 1) as f64)
}

/// Under [`FirstTokenPolicy::Skip`] an absent position is dropped from both
/// the sum and the `1/k` factor.
pub fn penalty_cp(
    tokens: &[TokenSpan],
    seq: &LogProbSequence,
    policy: FirstTokenPolicy,
    weight: f64,
) -> Result<f64, PenaltyError> {
    let mut sum = 0.0;
    let mut used = 0usize;
    for t in tokens {
        if let Some(p) = probability_at(seq, t.position, policy)? {
            sum += 1.0 - p;
            used += 1;
        }
    }
    if used == 0 {
        return Ok(0.0);
    }
    Ok(weight * sum / used as f64)
}

/// Empty input aggregates to 0 under every rule.
pub fn aggregate(values: &[f64], how: Aggregation) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    match how {
        Aggregation::Sum => values.iter().sum(),
        Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::TopK(k) => {
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let top = &sorted[..k.max(1).min(sorted.len())];
            top.iter().sum::<f64>() / top.len() as f64
        }
    }
}

/// `(B1, B2)`: total token count and number of split words.
pub fn baselines(tokens: &[TokenSpan], words: &[WordTokenization]) -> (usize, usize) {
    (tokens.len(), words.iter().filter(|w| w.is_split()).count())
}

pub fn perplexity(seq: &LogProbSequence) -> Result<f64, PenaltyError> {
    let present: Vec<f64> = seq.logprobs().iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(PenaltyError::NoLogProbs);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((-mean).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordPenalty {
    pub word: NaturalWord,
    pub k: usize,
    pub values: BTreeMap<PenaltyFunction, f64>,
    pub pos_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstancePenalties {
    pub id: String,
    pub correct: bool,
    pub word_penalties: Vec<WordPenalty>,
    pub aggregates: BTreeMap<(PenaltyFunction, Aggregation), f64>,
    pub b1: usize,
    pub b2: usize,
    pub perplexity: Option<f64>,
    /// Tokens covering natural words, and the natural-word count.
    pub fertility_terms: (usize, usize),
}

/// Loaded assets a run can draw on. Functions whose assets are missing are
/// not computed.
#[derive(Clone, Copy)]
pub struct PenaltyAssets<'a> {
    pub tokenizer: &'a Tokenizer,
    pub embeddings: Option<&'a EmbeddingMatrix>,
    /// Per-token anomaly scores indexed by token id.
    pub anomaly: Option<&'a [f64]>,
    pub unused: Option<&'a UnusedTokenSet>,
    pub logprobs: Option<&'a BTreeMap<String, LogProbSequence>>,
}

impl PenaltyAssets<'_> {
    pub fn check(&self) -> Result<(), PenaltyError> {
        let vocab = self.tokenizer.vocab().size();
        if let Some(e) = self.embeddings {
            if e.rows() != vocab {
                return Err(PenaltyError::AssetMismatch {
                    asset: "embedding matrix",
                    vocab,
                    rows: e.rows(),
                });
            }
            if let Some(u) = self.unused {
                if u.mean_vector().len() != e.dim() {
                    return Err(PenaltyError::UnusedDimMismatch {
                        expected: e.dim(),
                        got: u.mean_vector().len(),
                    });
                }
            }
        }
        if let Some(s) = self.anomaly {
            if s.len() != vocab {
                return Err(PenaltyError::AssetMismatch {
                    asset: "anomaly score table",
                    vocab,
                    rows: s.len(),
                });
            }
        }
        Ok(())
    }

    pub fn supports(&self, f: PenaltyFunction) -> bool {
        match f {
            PenaltyFunction::AS => self.anomaly.is_some(),
            PenaltyFunction::UT => self.embeddings.is_some() && self.unused.is_some(),
            PenaltyFunction::PD => self.embeddings.is_some(),
            PenaltyFunction::CP => self.logprobs.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub functions: Vec<PenaltyFunction>,
    pub aggregations: Vec<Aggregation>,
    /// When false every POS weight is 1.
    pub pos_weighting: bool,
    pub first_token: FirstTokenPolicy,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            functions: PenaltyFunction::ALL.to_vec(),
            aggregations: Aggregation::defaults(),
            pos_weighting: true,
            first_token: FirstTokenPolicy::default(),
        }
    }
}

pub fn score_instance(
    record: &InstanceRecord,
    assets: &PenaltyAssets<'_>,
    cfg: &PenaltyConfig,
) -> Result<InstancePenalties, PenaltyError> {
    score_inner(record, assets, cfg).map_err(|e| PenaltyError::Instance {
        id: record.id.clone(),
        source: Box::new(e),
    })
}

fn score_inner(
    record: &InstanceRecord,
    assets: &PenaltyAssets<'_>,
    cfg: &PenaltyConfig,
) -> Result<InstancePenalties, PenaltyError> {
    assets.check()?;
    let spans = assets.tokenizer.encode(&record.text)?;
    let words = effective_words(record)?;
    let aligned = align(&words, &spans);

    let seq = match assets.logprobs {
        Some(map) => {
            let key = record.logprob_key();
            let seq = map
                .get(key)
                .ok_or_else(|| PenaltyError::MissingSequence(key.to_string()))?;
            let ids: Vec<TokenId> = spans.iter().map(|s| s.token_id).collect();
            seq.check_tokens(&ids)?;
            Some(seq)
        }
        None => None,
    };

    let functions: Vec<PenaltyFunction> = cfg
        .functions
        .iter()
        .copied()
        .filter(|&f| assets.supports(f))
        .collect();

    let mut word_penalties = Vec::new();
    for w in aligned.iter().filter(|w| w.is_split()) {
        let weight = pos_weight(w.word.pos.as_deref(), cfg.pos_weighting);
        let mut values = BTreeMap::new();
        for &f in &functions {
            let v = match f {
                PenaltyFunction::AS => penalty_as(&w.tokens, assets.anomaly.unwrap())?,
                PenaltyFunction::UT => {
                    penalty_ut(&w.tokens, assets.embeddings.unwrap(), assets.unused.unwrap())?
                }
                PenaltyFunction::PD => penalty_pd(&w.tokens, assets.embeddings.unwrap())?,
                PenaltyFunction::CP => {
                    penalty_cp(&w.tokens, seq.unwrap(), cfg.first_token, weight)?
                }
            };
            values.insert(f, v);
        }
        word_penalties.push(WordPenalty {
            word: w.word.clone(),
            k: w.k(),
            values,
            pos_weight: weight,
        });
    }

    let mut aggregates = BTreeMap::new();
    for &f in &functions {
        let vals: Vec<f64> = word_penalties.iter().map(|w| w.values[&f]).collect();
        for &agg in &cfg.aggregations {
            aggregates.insert((f, agg), aggregate(&vals, agg));
        }
    }

    let (b1, b2) = baselines(&spans, &aligned);
    // A lone first token has no conditional log-prob; PPL is left undefined.
    let perplexity = seq.and_then(|s| perplexity(s).ok());
    let fertility_terms = (aligned.iter().map(|w| w.k()).sum(), aligned.len());

    Ok(InstancePenalties {
        id: record.id.clone(),
        correct: record.correct,
        word_penalties,
        aggregates,
        b1,
        b2,
        perplexity,
        fertility_terms,
    })
}

/// One line of a penalty dump: every computed column plus fertility terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRow {
    pub id: String,
    pub correct: bool,
    pub columns: BTreeMap<String, f64>,
    pub word_tokens: usize,
    pub words: usize,
}

const RESERVED: [&str; 4] = ["id", "correct", "word_tokens", "words"];

impl From<&InstancePenalties> for DumpRow {
    fn from(p: &InstancePenalties) -> Self {
        let mut columns: BTreeMap<String, f64> = p
            .aggregates
            .iter()
            .map(|(&(f, agg), &v)| (column_name(f, agg), v))
            .collect();
        columns.insert("B1".into(), p.b1 as f64);
        columns.insert("B2".into(), p.b2 as f64);
        if let Some(ppl) = p.perplexity {
            columns.insert("PPL".into(), ppl);
        }
        DumpRow {
            id: p.id.clone(),
            correct: p.correct,
            columns,
            word_tokens: p.fertility_terms.0,
            words: p.fertility_terms.1,
        }
    }
}

impl DumpRow {
    fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("id".into(), self.id.clone().into());
        m.insert("correct".into(), self.correct.into());
        m.insert("word_tokens".into(), self.word_tokens.into());
        m.insert("words".into(), self.words.into());
        for (k, &v) in &self.columns {
            m.insert(k.clone(), v.into());
        }
        Value::Object(m)
    }

    fn from_json(v: Value, line: usize) -> Result<Self, PenaltyError> {
        let bad = |message: String| PenaltyError::MalformedDump { line, message };
        let Value::Object(m) = v else {
            return Err(bad("expected an object".into()));
        };
        let id = m
            .get("id")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing string field \"id\"".into()))?
            .to_string();
        let correct = m
            .get("correct")
            .and_then(Value::as_bool)
            .ok_or_else(|| bad("missing boolean field \"correct\"".into()))?;
        let count = |key: &str| m.get(key).and_then(Value::as_u64).unwrap_or(0) as usize;
        let mut columns = BTreeMap::new();
        for (k, v) in &m {
            if RESERVED.contains(&k.as_str()) {
                continue;
            }
            let x = v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad(format!("column {k:?} is not a finite number")))?;
            columns.insert(k.clone(), x);
        }
        Ok(DumpRow {
            id,
            correct,
            columns,
            word_tokens: count("word_tokens"),
            words: count("words"),
        })
    }
}

pub fn write_dump(path: &Path, rows: &[DumpRow]) -> Result<(), PenaltyError> {
    let io = |source| PenaltyError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in rows {
        writeln!(w, "{}", r.to_json()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_dump(path: &Path) -> Result<Vec<DumpRow>, PenaltyError> {
    let io = |source| PenaltyError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| PenaltyError::MalformedDump {
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(DumpRow::from_json(v, i + 1)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::unused_token_set;
    use crate::tokenizer::TokenizerConfig;
    use proptest::prelude::*;

    fn spans(ids: &[TokenId]) -> Vec<TokenSpan> {
        ids.iter()
            .enumerate()
            .map(|(i, &id)| TokenSpan {
                token_id: id,
                start: i,
                end: i + 1,
                content_start: i,
                position: i,
            })
            .collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn as_examples() {
        assert!(close(penalty_as(&spans(&[0, 1]), &[0.2, 0.4]).unwrap(), 0.3));
        assert_eq!(penalty_as(&spans(&[0, 0, 0]), &[1.0]).unwrap(), 1.0);
        assert_eq!(penalty_as(&spans(&[0, 1]), &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            penalty_as(&spans(&[0, 5]), &[0.0]),
            Err(PenaltyError::MissingScore(5))
        ));
    }

    fn unit_emb() -> EmbeddingMatrix {
        // 0: (1,0)  1: (0,1)  2: (-1,0)
        EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap()
    }

    #[test]
    fn ut_examples() {
        let emb = unit_emb();
        let u = unused_token_set(&emb, Some(&[0]), None).unwrap();
        assert!(close(penalty_ut(&spans(&[0, 1]), &emb, &u).unwrap(), 0.5));
        assert!(close(penalty_ut(&spans(&[2, 2]), &emb, &u).unwrap(), -1.0));
        assert!(close(penalty_ut(&spans(&[0, 0]), &emb, &u).unwrap(), 1.0));
    }

    #[test]
    fn pd_examples() {
        let emb = unit_emb();
        assert!(close(penalty_pd(&spans(&[0, 1, 0]), &emb).unwrap(), 1.0));
        assert_eq!(penalty_pd(&spans(&[1, 1]), &emb).unwrap(), 0.0);
        assert!(close(penalty_pd(&spans(&[0, 2]), &emb).unwrap(), 2.0));
        assert!(matches!(
            penalty_pd(&spans(&[0, 9]), &emb),
            Err(PenaltyError::MissingEmbedding(9))
        ));
    }

    fn seq_from_probs(probs: &[f64]) -> LogProbSequence {
        LogProbSequence::new(
            vec![0; probs.len()],
            probs.iter().map(|p| Some(p.ln())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cp_examples() {
        let policy = FirstTokenPolicy::default();
        let s = seq_from_probs(&[0.9, 0.5]);
        let wt = pos_weight(Some("VERB"), true);
        assert!(close(penalty_cp(&spans(&[0, 0]), &s, policy, wt).unwrap(), 0.6));

        let s = seq_from_probs(&[1.0, 1.0]);
        assert_eq!(penalty_cp(&spans(&[0, 0]), &s, policy, 2.0).unwrap(), 0.0);

        // probability 0 arrives through the absent-first-token floor and the clamp
        let s = LogProbSequence::new(vec![0; 3], vec![None, Some(-800.0), Some(-800.0)]).unwrap();
        let wt = pos_weight(Some("PROPN"), true);
        assert_eq!(wt, 1.0);
        let cp = penalty_cp(&spans(&[0, 0, 0]), &s, policy, wt).unwrap();
        assert!((cp - 1.0).abs() < 1e-11);
    }

    #[test]
    fn cp_skip_policy_drops_absent_position() {
        let s = LogProbSequence::new(vec![0; 2], vec![None, Some(0.5f64.ln())]).unwrap();
        let cp = penalty_cp(&spans(&[0, 0]), &s, FirstTokenPolicy::Skip, 1.0).unwrap();
        assert!(close(cp, 0.5));
        let floor = penalty_cp(&spans(&[0, 0]), &s, FirstTokenPolicy::default(), 1.0).unwrap();
        assert!(close(floor, 0.75));
    }

    #[test]
    fn pos_weights() {
        for p in CONTENT_POS {
            assert_eq!(pos_weight(Some(p), true), 2.0);
            assert_eq!(pos_weight(Some(p), false), 1.0);
        }
        assert_eq!(pos_weight(Some("DET"), true), 1.0);
        assert_eq!(pos_weight(None, true), 1.0);
    }

    #[test]
    fn aggregation_examples() {
        let v = [0.2, 0.8, 0.5];
        assert!(close(aggregate(&v, Aggregation::TopK(2)), 0.65));
        assert_eq!(aggregate(&v, Aggregation::Max), 0.8);
        assert!(close(aggregate(&v, Aggregation::Sum), 1.5));
        assert!(close(aggregate(&v, Aggregation::Mean), 0.5));
        for how in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max, Aggregation::TopK(3)] {
            assert_eq!(aggregate(&[], how), 0.0);
        }
    }

    #[test]
    fn aggregation_names_round_trip() {
        for a in [Aggregation::Sum, Aggregation::Mean, Aggregation::Max, Aggregation::TopK(7)] {
            assert_eq!(a.name().parse::<Aggregation>().unwrap(), a);
        }
        assert_eq!("mean".parse::<Aggregation>().unwrap(), Aggregation::Mean);
        assert!(matches!("top0".parse::<Aggregation>(), Err(PenaltyError::ZeroK)));
        assert!("median".parse::<Aggregation>().is_err());
        assert_eq!(column_name(PenaltyFunction::CP, Aggregation::TopK(3)), "CP_top3");
        assert_eq!("cp".parse::<PenaltyFunction>().unwrap(), PenaltyFunction::CP);
    }

    #[test]
    fn perplexity_examples() {
        let two = LogProbSequence::new(vec![0; 4], vec![Some(-(2f64.ln())); 4]).unwrap();
        assert!(close(perplexity(&two).unwrap(), 2.0));
        let one = LogProbSequence::new(vec![0], vec![Some(0.0)]).unwrap();
        assert_eq!(perplexity(&one).unwrap(), 1.0);
        let s = LogProbSequence::new(vec![0, 0], vec![Some(-1.0), Some(-3.0)]).unwrap();
        assert!((perplexity(&s).unwrap() - 7.38905609893065).abs() < 1e-12);
        let none = LogProbSequence::new(vec![0], vec![None]).unwrap();
        assert!(matches!(perplexity(&none), Err(PenaltyError::NoLogProbs)));
    }

    fn word_tok(k: usize) -> WordTokenization {
        WordTokenization {
            word: NaturalWord {
                text: "w".into(),
                start: 0,
                end: 1,
                pos: None,
            },
            tokens: spans(&vec![0; k]),
        }
    }

    #[test]
    fn baseline_examples() {
        let words: Vec<_> = [2, 1, 3, 4, 1].iter().map(|&k| word_tok(k)).collect();
        assert_eq!(baselines(&spans(&[0; 12]), &words), (12, 3));
        assert_eq!(baselines(&spans(&[0; 4]), &[word_tok(1)]), (4, 0));
        assert_eq!(baselines(&[], &[]), (0, 0));
    }

    /// Character-level toy vocabulary, with whole-word merges for "cat" and "sat".
    fn toy_tokenizer() -> Tokenizer {
        let mut tokens: Vec<String> = ('a'..='z').map(|c| c.to_string()).collect();
        tokens.extend(["▁", " ", ".", "at", "▁c", "▁cat", "▁s", "▁sat"].map(String::from));
        let merges = [("a", "t"), ("▁", "c"), ("▁c", "at"), ("▁", "s"), ("▁s", "at")]
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .to_vec();
        Tokenizer::from_parts(tokens, merges, TokenizerConfig::default()).unwrap()
    }

    fn record(id: &str, text: &str) -> InstanceRecord {
        InstanceRecord {
            id: id.into(),
            text: text.into(),
            correct: true,
            words: None,
            logprob_ref: None,
        }
    }

    struct Owned {
        tok: Tokenizer,
        emb: EmbeddingMatrix,
        scores: Vec<f64>,
        unused: UnusedTokenSet,
        lps: BTreeMap<String, LogProbSequence>,
    }

    impl Owned {
        fn new(records: &[InstanceRecord], seed: u64) -> Self {
            use rand::{Rng, SeedableRng};
            let tok = toy_tokenizer();
            let n = tok.vocab().size();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            let emb = EmbeddingMatrix::from_rows(&rows).unwrap();
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let unused = unused_token_set(&emb, Some(&[0, 1]), None).unwrap();
            let mut lps = BTreeMap::new();
            for r in records {
                let ids = tok.encode_ids(&r.text).unwrap();
                let lp = ids
                    .iter()
                    .enumerate()
                    .map(|(i, _)| (i > 0).then(|| -rng.random_range(0.0..5.0)))
                    .collect();
                lps.insert(r.id.clone(), LogProbSequence::new(ids, lp).unwrap());
            }
            Self {
                tok,
                emb,
                scores,
                unused,
                lps,
            }
        }

        fn assets(&self) -> PenaltyAssets<'_> {
            PenaltyAssets {
                tokenizer: &self.tok,
                embeddings: Some(&self.emb),
                anomaly: Some(&self.scores),
                unused: Some(&self.unused),
                logprobs: Some(&self.lps),
            }
        }
    }

    #[test]
    fn zero_law_on_single_token_words() {
        let r = record("z", "cat sat.");
        let owned = Owned::new(std::slice::from_ref(&r), 1);
        let p = score_instance(&r, &owned.assets(), &PenaltyConfig::default()).unwrap();
        assert_eq!(p.b2, 0);
        assert!(p.word_penalties.is_empty());
        assert_eq!(p.aggregates.len(), 16);
        assert!(p.aggregates.values().all(|&v| v == 0.0));
        assert_eq!(p.fertility_terms, (2, 2));
        // perplexity is positive even though nothing is split
        assert!(p.perplexity.unwrap() > 1.0);
    }

    #[test]
    fn split_words_are_scored() {
        let r = record("s", "dog sat");
        let owned = Owned::new(std::slice::from_ref(&r), 2);
        let p = score_instance(&r, &owned.assets(), &PenaltyConfig::default()).unwrap();
        assert_eq!(p.b1, 5); // ▁ d o g ▁sat
        assert_eq!(p.b2, 1);
        assert_eq!(p.word_penalties[0].k, 3);
        assert_eq!(p.word_penalties[0].word.text, "dog");
        assert_eq!(p.fertility_terms, (4, 2));
        for f in PenaltyFunction::ALL {
            let v = p.word_penalties[0].values[&f];
            assert_eq!(p.aggregates[&(f, Aggregation::Max)], v);
            assert_eq!(p.aggregates[&(f, Aggregation::Sum)], v);
        }
    }

    #[test]
    fn missing_assets_drop_functions() {
        let r = record("s", "dog sat");
        let owned = Owned::new(std::slice::from_ref(&r), 3);
        let assets = PenaltyAssets {
            embeddings: None,
            anomaly: None,
            unused: None,
            ..owned.assets()
        };
        let p = score_instance(&r, &assets, &PenaltyConfig::default()).unwrap();
        assert!(p.aggregates.keys().all(|(f, _)| *f == PenaltyFunction::CP));
        assert_eq!(p.aggregates.len(), 4);
    }

    #[test]
    fn asset_size_mismatch_is_rejected() {
        let r = record("s", "dog");
        let owned = Owned::new(std::slice::from_ref(&r), 4);
        let short = EmbeddingMatrix::from_rows(&vec![vec![1.0f32]; owned.tok.vocab().size() - 1]).unwrap();
        let assets = PenaltyAssets {
            embeddings: Some(&short),
            unused: None,
            ..owned.assets()
        };
        let err = score_instance(&r, &assets, &PenaltyConfig::default()).unwrap_err();
        let PenaltyError::Instance { id, source } = err else { panic!() };
        assert_eq!(id, "s");
        assert!(matches!(*source, PenaltyError::AssetMismatch { .. }));
    }

    #[test]
    fn logprob_tokenization_mismatch_is_reported() {
        let r = record("s", "dog");
        let mut owned = Owned::new(std::slice::from_ref(&r), 5);
        owned.lps.insert("s".into(), LogProbSequence::new(vec![1, 2], vec![None, Some(-1.0)]).unwrap());
        let err = score_instance(&r, &owned.assets(), &PenaltyConfig::default()).unwrap_err();
        let PenaltyError::Instance { source, .. } = err else { panic!() };
        assert!(matches!(
            *source,
            PenaltyError::LogProb(LogProbError::TokenizationMismatch { position: 0, .. })
        ));
    }

    #[test]
    fn pos_ablation_halves_content_words_only() {
        let mut r = record("p", "dog bit ox");
        r.words = Some(vec![
            NaturalWord { text: "dog".into(), start: 0, end: 3, pos: Some("NOUN".into()) },
            NaturalWord { text: "bit".into(), start: 4, end: 7, pos: Some("VERB".into()) },
            NaturalWord { text: "ox".into(), start: 8, end: 10, pos: Some("PROPN".into()) },
        ]);
        let owned = Owned::new(std::slice::from_ref(&r), 6);
        let on = score_instance(&r, &owned.assets(), &PenaltyConfig::default()).unwrap();
        let cfg = PenaltyConfig {
            pos_weighting: false,
            ..PenaltyConfig::default()
        };
        let off = score_instance(&r, &owned.assets(), &cfg).unwrap();
        assert_eq!(on.word_penalties.len(), 3);
        for (a, b) in on.word_penalties.iter().zip(&off.word_penalties) {
            let (ca, cb) = (a.values[&PenaltyFunction::CP], b.values[&PenaltyFunction::CP]);
            if a.word.pos.as_deref() == Some("PROPN") {
                assert_eq!(ca, cb);
            } else {
                assert_eq!(ca, 2.0 * cb);
            }
            assert_eq!(a.values[&PenaltyFunction::PD], b.values[&PenaltyFunction::PD]);
        }
    }

    #[test]
    fn single_token_instance_has_no_perplexity() {
        let r = record("x", "sat");
        let owned = Owned::new(std::slice::from_ref(&r), 3);
        assert_eq!(owned.lps["x"].len(), 1);
        let p = score_instance(&r, &owned.assets(), &PenaltyConfig::default()).unwrap();
        assert_eq!(p.perplexity, None);
        assert!(!DumpRow::from(&p).columns.contains_key("PPL"));
    }

    #[test]
    fn perplexity_can_be_high_while_cp_is_zero() {
        let r = record("q", "cat sat");
        let ids = toy_tokenizer().encode_ids(&r.text).unwrap();
        let mut owned = Owned::new(std::slice::from_ref(&r), 7);
        let lp = vec![Some(-6.0); ids.len()];
        owned.lps.insert("q".into(), LogProbSequence::new(ids, lp).unwrap());
        let p = score_instance(&r, &owned.assets(), &PenaltyConfig::default()).unwrap();
        assert!(p.perplexity.unwrap() > 400.0);
        assert_eq!(p.aggregates[&(PenaltyFunction::CP, Aggregation::Max)], 0.0);
    }

    #[test]
    fn dump_round_trip() {
        let r = record("s", "dog sat");
        let owned = Owned::new(std::slice::from_ref(&r), 8);
        let p = score_instance(&r, &owned.assets(), &PenaltyConfig::default()).unwrap();
        let row = DumpRow::from(&p);
        assert!(row.columns.contains_key("CP_top3"));
        assert!(row.columns.contains_key("AS_avg"));
        assert_eq!(row.columns["B2"], 1.0);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_dump(f.path(), std::slice::from_ref(&row)).unwrap();
        assert_eq!(load_dump(f.path()).unwrap(), vec![row]);
    }

    proptest! {
        #[test]
        fn cp_is_monotone(probs in prop::collection::vec(0.0f64..1.0, 2..6), idx in 0usize..6, drop in 0.01f64..0.5) {
            let idx = idx % probs.len();
            prop_assume!(probs[idx] - drop > MIN_P);
            let s = seq_from_probs(&probs);
            let mut lower = probs.clone();
            lower[idx] -= drop;
            let s2 = seq_from_probs(&lower);
            let t = spans(&vec![0; probs.len()]);
            let a = penalty_cp(&t, &s, FirstTokenPolicy::Skip, 2.0).unwrap();
            let b = penalty_cp(&t, &s2, FirstTokenPolicy::Skip, 2.0).unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn aggregation_consistency(v in prop::collection::vec(0.0f64..10.0, 1..20), k in 1usize..25) {
            let sum = aggregate(&v, Aggregation::Sum);
            prop_assert!(aggregate(&v, Aggregation::Max) <= sum + 1e-12);
            prop_assert!((aggregate(&v, Aggregation::Mean) - sum / v.len() as f64).abs() < 1e-12);
            if k >= v.len() {
                prop_assert!((aggregate(&v, Aggregation::TopK(k)) - aggregate(&v, Aggregation::Mean)).abs() < 1e-12);
            }
        }

        #[test]
        fn ranges_hold(text in "[a-z]{1,8}( [a-z]{1,8}){0,5}", seed in 0u64..1000) {
            let r = record("r", &text);
            let owned = Owned::new(std::slice::from_ref(&r), seed);
            let p = score_instance(&r, &owned.assets(), &PenaltyConfig::default()).unwrap();
            for w in &p.word_penalties {
                let v = &w.values;
                prop_assert!((0.0..=1.0).contains(&v[&PenaltyFunction::AS]));
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v[&PenaltyFunction::UT]));
                prop_assert!((0.0..=2.0).contains(&v[&PenaltyFunction::PD]));
                prop_assert!((0.0..=2.0).contains(&v[&PenaltyFunction::CP]));
            }
            prop_assert_eq!(p.b2, p.word_penalties.len());
        }
    }

    const MIN_P: f64 = crate::logprob::MIN_PROBABILITY;
}

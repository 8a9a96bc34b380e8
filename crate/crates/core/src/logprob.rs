//! Next-token log-probabilities for instance token sequences.
//!
//! Sequences come either from a JSON-lines file
//! (`{"id": .., "token_ids": [..], "logprobs": [float|null, ..]}`) or from an
//! OpenAI-style completions endpoint queried with `echo=true, max_tokens=0,
//! logprobs=1`. Both sources are checked against the local tokenizer: a
//! sequence whose token ids differ from the expected encoding is rejected,
//! never realigned.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::tokenizer::{TokenId, Vocabulary};

/// Lower clamp applied to probabilities derived from present log-probs.
pub const MIN_PROBABILITY: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum LogProbError {
    #[error("cannot access log-prob file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("log-prob line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("{id:?}: {ids} token ids but {logprobs} log-probs")]
    LengthMismatch {
        id: String,
        ids: usize,
        logprobs: usize,
    },
    #[error("{id:?}: log-prob {value} at position {position} is not a finite value <= 0")]
    InvalidLogProb {
        id: String,
        position: usize,
        value: f64,
    },
    #[error("{id:?}: log-prob missing at position {position}; only position 0 may be absent")]
    MissingLogProb { id: String, position: usize },
    #[error("duplicate log-prob entry for {0:?}")]
    DuplicateId(String),
    #[error("no log-prob sequence for instance {0:?}")]
    UnknownInstance(String),
    #[error("position {position} out of range for sequence of length {len}")]
    OutOfRange { position: usize, len: usize },
    #[error("tokenization mismatch at position {position}: expected {expected:?}, got {got:?}")]
    TokenizationMismatch {
        position: usize,
        expected: Option<TokenId>,
        got: Option<String>,
    },
}

#[derive(Error, Debug)]
pub enum ProviderError {
    #[error("provider misconfigured: {0}")]
    Config(String),
    #[error("environment variable {0} holding the API token is not set")]
    MissingToken(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status} from endpoint: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
    #[error(transparent)]
    Sequence(#[from] LogProbError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbSequence {
    token_ids: Vec<TokenId>,
    logprobs: Vec<Option<f64>>,
}

impl LogProbSequence {
    pub fn new(token_ids: Vec<TokenId>, logprobs: Vec<Option<f64>>) -> Result<Self, LogProbError> {
        Self::validated(String::new(), token_ids, logprobs)
    }

    fn validated(
        id: String,
        token_ids: Vec<TokenId>,
        logprobs: Vec<Option<f64>>,
    ) -> Result<Self, LogProbError> {
        if token_ids.len() != logprobs.len() {
            return Err(LogProbError::LengthMismatch {
                id,
                ids: token_ids.len(),
                logprobs: logprobs.len(),
            });
        }
        for (position, lp) in logprobs.iter().enumerate() {
            match *lp {
                None if position > 0 => {
                    return Err(LogProbError::MissingLogProb { id, position });
                }
                Some(value) if !(value <= 0.0) || value.is_infinite() => {
                    return Err(LogProbError::InvalidLogProb { id, position, value });
                }
                _ => {}
            }
        }
        Ok(Self { token_ids, logprobs })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn logprobs(&self) -> &[Option<f64>] {
        &self.logprobs
    }

    /// Fails with the first divergent position unless this sequence carries
    /// exactly `expected`.
    pub fn check_tokens(&self, expected: &[TokenId]) -> Result<(), LogProbError> {
        first_divergence(expected, &self.token_ids).map_or(Ok(()), |position| {
            Err(LogProbError::TokenizationMismatch {
                position,
                expected: expected.get(position).copied(),
                got: self.token_ids.get(position).map(|id| id.to_string()),
            })
        })
    }
}

fn first_divergence<T: PartialEq>(a: &[T], b: &[T]) -> Option<usize> {
    a.iter()
        .zip(b)
        .position(|(x, y)| x != y)
        .or_else(|| (a.len() != b.len()).then(|| a.len().min(b.len())))
}

/// What an absent log-prob (no left context) contributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstTokenPolicy {
    /// Use `exp(floor)`; the default floor of `-inf` means probability 0.
    Floor(f64),
    /// Leave the position out of the penalty.
    Skip,
}

impl Default for FirstTokenPolicy {
    fn default() -> Self {
        FirstTokenPolicy::Floor(f64::NEG_INFINITY)
    }
}

/// Probability of the token at `position`, or `None` when the policy skips it.
pub fn probability_at(
    seq: &LogProbSequence,
    position: usize,
    policy: FirstTokenPolicy,
) -> Result<Option<f64>, LogProbError> {
    let lp = seq.logprobs.get(position).ok_or(LogProbError::OutOfRange {
        position,
        len: seq.len(),
    })?;
    Ok(match (*lp, policy) {
        (Some(lp), _) => Some(lp.exp().clamp(MIN_PROBABILITY, 1.0)),
        (None, FirstTokenPolicy::Floor(floor)) => Some(floor.exp().min(1.0)),
        (None, FirstTokenPolicy::Skip) => None,
    })
}

#[derive(Serialize, Deserialize)]
struct FileLine {
    id: String,
    token_ids: Vec<TokenId>,
    logprobs: Vec<Option<f64>>,
}

pub fn load_logprob_file(path: &Path) -> Result<BTreeMap<String, LogProbSequence>, LogProbError> {
    let io = |source| LogProbError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: FileLine = serde_json::from_str(&line).map_err(|e| LogProbError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        let seq = LogProbSequence::validated(entry.id.clone(), entry.token_ids, entry.logprobs)?;
        if out.insert(entry.id.clone(), seq).is_some() {
            return Err(LogProbError::DuplicateId(entry.id));
        }
    }
    Ok(out)
}

pub fn write_logprob_file(
    path: &Path,
    seqs: &BTreeMap<String, LogProbSequence>,
) -> Result<(), LogProbError> {
    let io = |source| LogProbError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for (id, seq) in seqs {
        let line = FileLine {
            id: id.clone(),
            token_ids: seq.token_ids.clone(),
            logprobs: seq.logprobs.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line).expect("plain struct")).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    #[default]
    File,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            mode: ProviderMode::File,
            endpoint: None,
            model: None,
            api_key_env: None,
            timeout_secs: 60,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.mode == ProviderMode::Http && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(ProviderError::Config(
                "http mode requires both endpoint and model".into(),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(ProviderError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
}

/// Blocking client for the completions endpoint.
pub struct CompletionsClient {
    cfg: ProviderConfig,
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
}

impl CompletionsClient {
    pub fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        cfg.validate()?;
        let endpoint = cfg
            .endpoint
            .as_deref()
            .ok_or_else(|| ProviderError::Config("endpoint not set".into()))?;
        let url = format!("{}/completions", endpoint.trim_end_matches('/'));
        let token = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ProviderError::MissingToken(var.clone()))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            cfg,
            agent,
            url,
            token,
        })
    }

    fn post_with_retry(&self, body: &serde_json::Value) -> Result<String, ProviderError> {
        let mut attempt = 0u32;
        loop {
            let mut req = self.agent.post(&self.url);
            if let Some(tok) = &self.token {
                req = req.header("Authorization", &format!("Bearer {tok}"));
            }
            let retryable = match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| ProviderError::BadResponse(e.to_string()));
                    if (200..300).contains(&status) {
                        return text;
                    }
                    let err = ProviderError::HttpStatus {
                        status,
                        body: excerpt(&text.unwrap_or_default()),
                    };
                    if status < 500 && status != 429 {
                        return Err(err);
                    }
                    err
                }
                Err(e) => ProviderError::Transport {
                    attempts: attempt + 1,
                    message: e.to_string(),
                },
            };
            if attempt >= self.cfg.max_retries {
                return Err(retryable);
            }
            log::warn!("completions request failed ({retryable}); retrying");
            std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << attempt.min(16)));
            attempt += 1;
        }
    }

    /// Echoes `text` through the endpoint and returns its per-token log-probs,
    /// checked against `expected_ids`.
    pub fn fetch(
        &self,
        text: &str,
        expected_ids: &[TokenId],
        vocab: &Vocabulary,
    ) -> Result<LogProbSequence, ProviderError> {
        let body = json!({
            "model": self.cfg.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
        });
        let raw = self.post_with_retry(&body)?;
        let resp: CompletionResponse =
            serde_json::from_str(&raw).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| ProviderError::BadResponse("choices[0].logprobs missing".into()))?;
        if lp.tokens.len() != lp.token_logprobs.len() {
            return Err(ProviderError::BadResponse(format!(
                "{} tokens but {} token_logprobs",
                lp.tokens.len(),
                lp.token_logprobs.len()
            )));
        }
        for (position, tok) in lp.tokens.iter().enumerate() {
            let matches = expected_ids
                .get(position)
                .is_some_and(|&want| token_candidates(vocab, tok).contains(&Some(want)));
            if !matches {
                return Err(LogProbError::TokenizationMismatch {
                    position,
                    expected: expected_ids.get(position).copied(),
                    got: Some(tok.clone()),
                }
                .into());
            }
        }
        if lp.tokens.len() != expected_ids.len() {
            return Err(LogProbError::TokenizationMismatch {
                position: lp.tokens.len(),
                expected: expected_ids.get(lp.tokens.len()).copied(),
                got: None,
            }
            .into());
        }
        Ok(LogProbSequence::validated(
            String::new(),
            expected_ids.to_vec(),
            lp.token_logprobs,
        )?)
    }
}

/// Vocabulary ids a returned token string may stand for: the literal string,
/// and with a leading space read as the boundary marker. Both can exist when
/// the vocabulary holds a plain space token as well as the marker.
fn token_candidates(vocab: &Vocabulary, tok: &str) -> [Option<TokenId>; 2] {
    let marker = vocab.boundary_marker();
    let as_marker = match tok.strip_prefix(' ') {
        Some(rest) if !marker.is_empty() => vocab.id(&format!("{marker}{rest}")),
        _ => None,
    };
    [vocab.id(tok), as_marker]
}

fn excerpt(s: &str) -> String {
    const MAX: usize = 200;
    match s.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

/// One instance to fetch: id, text, and the locally computed token ids.
pub struct FetchItem<'a> {
    pub id: &'a str,
    pub text: &'a str,
    pub token_ids: Vec<TokenId>,
}

/// Fetches all items with at most `max_in_flight` concurrent requests.
/// Results are keyed by instance id.
pub fn fetch_all(
    client: &CompletionsClient,
    items: &[FetchItem<'_>],
    vocab: &Vocabulary,
) -> BTreeMap<String, Result<LogProbSequence, ProviderError>> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(BTreeMap::new());
    let workers = client.cfg.max_in_flight.min(items.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = client.fetch(item.text, &item.token_ids, vocab);
                results.lock().unwrap().insert(item.id.to_string(), r);
            });
        }
    });
    results.into_inner().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_examples() {
        let seq = LogProbSequence::new(vec![1, 2, 3], vec![None, Some(-0.1053605), Some(0.0)]).unwrap();
        let p = probability_at(&seq, 1, FirstTokenPolicy::default()).unwrap().unwrap();
        assert!((p - 0.9).abs() < 1e-7);
        assert_eq!(probability_at(&seq, 2, FirstTokenPolicy::default()).unwrap(), Some(1.0));
        assert_eq!(probability_at(&seq, 0, FirstTokenPolicy::default()).unwrap(), Some(0.0));
        assert_eq!(probability_at(&seq, 0, FirstTokenPolicy::Skip).unwrap(), None);
        assert!(matches!(
            probability_at(&seq, 3, FirstTokenPolicy::default()),
            Err(LogProbError::OutOfRange { position: 3, len: 3 })
        ));
    }

    #[test]
    fn tiny_probabilities_are_clamped() {
        let seq = LogProbSequence::new(vec![1], vec![Some(-200.0)]).unwrap();
        assert_eq!(probability_at(&seq, 0, FirstTokenPolicy::Skip).unwrap(), Some(MIN_PROBABILITY));
    }

    #[test]
    fn probability_is_monotone_in_logprob() {
        let lps: Vec<f64> = (0..50).map(|i| -(i as f64) * 0.37).collect();
        let seq = LogProbSequence::new(vec![0; 50], lps.iter().map(|&v| Some(v)).collect()).unwrap();
        let ps: Vec<f64> = (0..50)
            .map(|i| probability_at(&seq, i, FirstTokenPolicy::Skip).unwrap().unwrap())
            .collect();
        assert!(ps.windows(2).all(|w| w[0] > w[1]));
        assert!(ps.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    fn file(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_and_validates_file() {
        let f = file(&[r#"{"id":"a","token_ids":[5,9],"logprobs":[null,-0.1054]}"#]);
        let m = load_logprob_file(f.path()).unwrap();
        assert_eq!(m["a"].len(), 2);
        assert_eq!(m["a"].logprobs()[1], Some(-0.1054));

        let f = file(&[r#"{"id":"a","token_ids":[5,9],"logprobs":[null]}"#]);
        assert!(matches!(load_logprob_file(f.path()), Err(LogProbError::LengthMismatch { .. })));

        let f = file(&[r#"{"id":"a","token_ids":[5,9],"logprobs":[null,0.2]}"#]);
        assert!(matches!(
            load_logprob_file(f.path()),
            Err(LogProbError::InvalidLogProb { position: 1, .. })
        ));

        let f = file(&[r#"{"id":"a","token_ids":[5,9],"logprobs":[-1.0,null]}"#]);
        assert!(matches!(
            load_logprob_file(f.path()),
            Err(LogProbError::MissingLogProb { position: 1, .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), LogProbSequence::new(vec![3, 1], vec![Some(-0.5), Some(-2.25)]).unwrap());
        m.insert("y".to_string(), LogProbSequence::new(vec![7], vec![None]).unwrap());
        let f = tempfile::NamedTempFile::new().unwrap();
        write_logprob_file(f.path(), &m).unwrap();
        assert_eq!(load_logprob_file(f.path()).unwrap(), m);
    }

    #[test]
    fn token_check_reports_first_divergence() {
        let seq = LogProbSequence::new(vec![1, 2, 3], vec![None, Some(-1.0), Some(-1.0)]).unwrap();
        assert!(seq.check_tokens(&[1, 2, 3]).is_ok());
        assert!(matches!(
            seq.check_tokens(&[1, 2, 3, 4]),
            Err(LogProbError::TokenizationMismatch { position: 3, expected: Some(4), got: None })
        ));
        assert!(matches!(
            seq.check_tokens(&[1, 5, 3]),
            Err(LogProbError::TokenizationMismatch { position: 1, .. })
        ));
    }

    #[test]
    fn http_mode_requires_endpoint_and_model() {
        let cfg = ProviderConfig {
            mode: ProviderMode::Http,
            endpoint: Some("http://localhost:1".into()),
            ..ProviderConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ProviderError::Config(_))));
    }
}

//! Dataset ingestion and natural-word segmentation.
//!
//! A *natural word* is a maximal run of ASCII letters (`^[A-Za-z]+$`). The
//! built-in segmenter returns exactly those runs; richer segmentations and POS
//! tags can be supplied per record through the `words` field of the dataset.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum CorpusError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("instance {id:?}: word annotation [{start}, {end}) outside text of {len} bytes")]
    OffsetOutOfRange {
        id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("instance {id:?}: word annotation {text:?} does not match text slice [{start}, {end})")]
    TextMismatch {
        id: String,
        text: String,
        start: usize,
        end: usize,
    },
}

/// A word of the instance text, addressed by UTF-8 byte offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NaturalWord {
    pub text: String,
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<String>,
}

impl NaturalWord {
    pub fn is_valid(&self) -> bool {
        is_natural_word(&self.text)
    }
}

/// One dataset item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub text: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<NaturalWord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_ref: Option<String>,
}

impl InstanceRecord {
    /// Key used to look up this instance in a log-prob file.
    pub fn logprob_key(&self) -> &str {
        self.logprob_ref.as_deref().unwrap_or(&self.id)
    }
}

pub fn is_natural_word(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphabetic())
}

/// Maximal runs of ASCII letters, in order. Everything else separates words.
pub fn segment_words(text: &str) -> Vec<NaturalWord> {
    let bytes = text.as_bytes();
    let mut words = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_alphabetic() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
            i += 1;
        }
        // ASCII bytes never fall inside a multi-byte sequence, so the slice is on
        // char boundaries.
        words.push(NaturalWord {
            text: text[start..i].to_string(),
            start,
            end: i,
            pos: None,
        });
    }
    words
}

/// Words to score for a record: its annotations filtered to valid natural words
/// when present, otherwise the built-in segmentation of its text.
pub fn effective_words(record: &InstanceRecord) -> Result<Vec<NaturalWord>, CorpusError> {
    let Some(annotated) = &record.words else {
        return Ok(segment_words(&record.text));
    };
    let len = record.text.len();
    let mut out = Vec::with_capacity(annotated.len());
    for w in annotated {
        if w.start > w.end || w.end > len {
            return Err(CorpusError::OffsetOutOfRange {
                id: record.id.clone(),
                start: w.start,
                end: w.end,
                len,
            });
        }
        if record.text.get(w.start..w.end) != Some(w.text.as_str()) {
            return Err(CorpusError::TextMismatch {
                id: record.id.clone(),
                text: w.text.clone(),
                start: w.start,
                end: w.end,
            });
        }
        if w.is_valid() {
            out.push(w.clone());
        }
    }
    out.sort_by_key(|w| w.start);
    Ok(out)
}

/// Reads a JSON-lines dataset. Blank lines are skipped; line numbers are 1-based.
pub fn load_dataset(path: &Path) -> Result<Vec<InstanceRecord>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InstanceRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: idx + 1,
                message: e.to_string(),
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

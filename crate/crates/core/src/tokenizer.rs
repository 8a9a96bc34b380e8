//! BPE inference over a fixed vocabulary and merge table.
//!
//! Text is pretokenized on whitespace. Each non-whitespace run becomes one
//! pretoken; when a boundary marker is configured, the run is prefixed with
//! the marker symbol, which absorbs a single preceding ASCII space (or is
//! zero-width at the start of the text when `dummy_prefix` is set). Other
//! whitespace characters, and spaces that cannot be absorbed, are standalone
//! pretokens. Merges are replayed inside each pretoken, lowest rank first,
//! leftmost first among equal ranks.
//!
//! With `byte_level`, characters missing from the vocabulary fall back to one
//! `<0xHH>` token per UTF-8 byte.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::NaturalWord;

pub type TokenId = u32;

#[derive(Error, Debug)]
pub enum TokenizerError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary line {line}: {message}")]
    MalformedVocab { line: usize, message: String },
    #[error("merges line {line}: expected \"LEFT RIGHT\", got {content:?}")]
    MalformedMerge { line: usize, content: String },
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("vocabulary ids are not dense: id {0} missing")]
    MissingId(usize),
    #[error("vocabulary id {0} appears twice")]
    DuplicateId(usize),
    #[error("duplicate token string {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("merge ({left:?}, {right:?}) appears twice")]
    DuplicateMerge { left: String, right: String },
    #[error("merge ({left:?}, {right:?}) produces {product:?}, which is not in the vocabulary")]
    UnknownMergeProduct {
        left: String,
        right: String,
        product: String,
    },
    #[error("symbol {symbol:?} at byte {offset} is not in the vocabulary")]
    UnknownSymbol { symbol: String, offset: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    InvalidId { id: TokenId, size: usize },
    #[error("decoded bytes are not valid UTF-8")]
    InvalidUtf8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Word-start marker, e.g. `"▁"` or `"Ġ"`. Empty disables markers; spaces
    /// are then ordinary symbols.
    pub boundary_marker: String,
    pub byte_level: bool,
    /// Treat the text as if preceded by a space, so the first word carries a
    /// zero-width marker.
    pub dummy_prefix: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            boundary_marker: "\u{2581}".to_string(),
            byte_level: false,
            dummy_prefix: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    config: TokenizerConfig,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, config: TokenizerConfig) -> Result<Self, TokenizerError> {
        if tokens.is_empty() {
            return Err(TokenizerError::EmptyVocab);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(TokenizerError::DuplicateToken(tok.clone()));
            }
        }
        Ok(Self {
            tokens,
            index,
            config,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn boundary_marker(&self) -> &str {
        &self.config.boundary_marker
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn new(merges: Vec<(String, String)>) -> Self {
        Self { merges }
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, String)> {
        self.merges.iter()
    }
}

/// A token of an encoded text. `content_start` is where the token's non-marker
/// content begins; it equals `start` unless the token opens with a marker that
/// absorbed a space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub token_id: TokenId,
    pub start: usize,
    pub end: usize,
    pub content_start: usize,
    pub position: usize,
}

impl TokenSpan {
    fn intersects(&self, start: usize, end: usize) -> bool {
        self.content_start < end && start < self.end && self.content_start < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordTokenization {
    pub word: NaturalWord,
    pub tokens: Vec<TokenSpan>,
}

impl WordTokenization {
    pub fn k(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_split(&self) -> bool {
        self.tokens.len() >= 2
    }
}

#[derive(Debug, Clone, Copy)]
struct Symbol {
    id: TokenId,
    start: usize,
    content_start: usize,
    end: usize,
}

impl Symbol {
    fn is_marker_only(&self) -> bool {
        self.content_start == self.end
    }
}

/// A validated vocabulary plus merge table, ready to encode.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: MergeTable,
    ranks: HashMap<(TokenId, TokenId), (u32, TokenId)>,
    byte_ids: Option<Box<[Option<TokenId>; 256]>>,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, merges: MergeTable) -> Result<Self, TokenizerError> {
        let mut seen = HashSet::with_capacity(merges.len());
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            if !seen.insert((left.as_str(), right.as_str())) {
                return Err(TokenizerError::DuplicateMerge {
                    left: left.clone(),
                    right: right.clone(),
                });
            }
            let product = format!("{left}{right}");
            let Some(merged) = vocab.id(&product) else {
                return Err(TokenizerError::UnknownMergeProduct {
                    left: left.clone(),
                    right: right.clone(),
                    product,
                });
            };
            // A merge whose inputs are not tokens can never fire.
            if let (Some(l), Some(r)) = (vocab.id(left), vocab.id(right)) {
                ranks.entry((l, r)).or_insert((rank as u32, merged));
            }
        }
        let byte_ids = vocab.config.byte_level.then(|| {
            let mut ids = Box::new([None; 256]);
            for (b, slot) in ids.iter_mut().enumerate() {
                *slot = vocab.id(&byte_token(b as u8));
            }
            ids
        });
        Ok(Self {
            vocab,
            merges,
            ranks,
            byte_ids,
        })
    }

    pub fn from_parts(
        tokens: Vec<String>,
        merges: Vec<(String, String)>,
        config: TokenizerConfig,
    ) -> Result<Self, TokenizerError> {
        Self::new(Vocabulary::new(tokens, config)?, MergeTable::new(merges))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenSpan>, TokenizerError> {
        let mut out = Vec::new();
        for pretoken in self.pretokenize(text)? {
            for sym in merge_pretoken(pretoken, &self.ranks) {
                out.push(TokenSpan {
                    token_id: sym.id,
                    start: sym.start,
                    end: sym.end,
                    content_start: sym.content_start,
                    position: out.len(),
                });
            }
        }
        Ok(out)
    }

    pub fn encode_ids(&self, text: &str) -> Result<Vec<TokenId>, TokenizerError> {
        Ok(self.encode(text)?.iter().map(|t| t.token_id).collect())
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(TokenizerError::InvalidId {
                id,
                size: self.vocab.size(),
            })?;
            match self.byte_ids.as_ref().and(parse_byte_token(tok)) {
                Some(b) => bytes.push(b),
                None => bytes.extend_from_slice(tok.as_bytes()),
            }
        }
        let mut text = String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)?;
        let marker = self.vocab.boundary_marker();
        if !marker.is_empty() {
            text = text.replace(marker, " ");
            if self.vocab.config.dummy_prefix && text.starts_with(' ') {
                text.remove(0);
            }
        }
        Ok(text)
    }

    fn char_symbols(
        &self,
        s: &str,
        offset: usize,
        out: &mut Vec<Symbol>,
    ) -> Result<(), TokenizerError> {
        if let Some(id) = self.vocab.id(s) {
            out.push(Symbol {
                id,
                start: offset,
                content_start: offset,
                end: offset + s.len(),
            });
            return Ok(());
        }
        let unknown = || TokenizerError::UnknownSymbol {
            symbol: s.to_string(),
            offset,
        };
        let byte_ids = self.byte_ids.as_ref().ok_or_else(unknown)?;
        for (j, b) in s.bytes().enumerate() {
            let id = byte_ids[b as usize].ok_or_else(unknown)?;
            out.push(Symbol {
                id,
                start: offset + j,
                content_start: offset + j,
                end: offset + j + 1,
            });
        }
        Ok(())
    }

    fn marker_symbols(&self, start: usize, end: usize) -> Result<Vec<Symbol>, TokenizerError> {
        let mut syms = Vec::new();
        self.char_symbols(self.vocab.boundary_marker(), start, &mut syms)?;
        // Marker symbols cover the absorbed space (or nothing) and carry no content.
        let n = syms.len();
        for (j, s) in syms.iter_mut().enumerate() {
            s.start = if j == 0 { start } else { end };
            s.end = if j + 1 == n { end } else { s.start };
            s.content_start = s.end;
        }
        Ok(syms)
    }

    fn pretokenize(&self, text: &str) -> Result<Vec<Vec<Symbol>>, TokenizerError> {
        let use_marker = !self.vocab.boundary_marker().is_empty();
        let mut pretokens: Vec<Vec<Symbol>> = Vec::new();
        let mut current: Option<Vec<Symbol>> = None;
        let mut pending: Option<(usize, usize)> =
            (use_marker && self.vocab.config.dummy_prefix && !text.is_empty()).then_some((0, 0));
        let mut buf = [0u8; 4];

        for (i, c) in text.char_indices() {
            let cs: &str = c.encode_utf8(&mut buf);
            if use_marker && c == ' ' {
                pretokens.extend(current.take());
                if let Some((s, e)) = pending.take() {
                    pretokens.push(self.marker_symbols(s, e)?);
                }
                pending = Some((i, i + 1));
            } else if c.is_whitespace() {
                pretokens.extend(current.take());
                if let Some((s, e)) = pending.take() {
                    pretokens.push(self.marker_symbols(s, e)?);
                }
                let mut ws = Vec::new();
                self.char_symbols(cs, i, &mut ws)?;
                pretokens.push(ws);
            } else {
                if current.is_none() {
                    current = Some(match pending.take() {
                        Some((s, e)) => self.marker_symbols(s, e)?,
                        None => Vec::new(),
                    });
                }
                let run = current.as_mut().expect("run started above");
                self.char_symbols(cs, i, run)?;
            }
        }
        pretokens.extend(current.take());
        if let Some((s, e)) = pending.take() {
            pretokens.push(self.marker_symbols(s, e)?);
        }
        Ok(pretokens)
    }
}

/// Replays merges inside one pretoken with a priority queue keyed on
/// (rank, left position).
fn merge_pretoken(
    symbols: Vec<Symbol>,
    ranks: &HashMap<(TokenId, TokenId), (u32, TokenId)>,
) -> Vec<Symbol> {
    let n = symbols.len();
    if n < 2 {
        return symbols;
    }
    let mut syms = symbols;
    let mut next: Vec<Option<usize>> = (0..n).map(|i| (i + 1 < n).then_some(i + 1)).collect();
    let mut prev: Vec<Option<usize>> = (0..n).map(|i| i.checked_sub(1)).collect();
    let mut alive = vec![true; n];
    let mut heap = BinaryHeap::new();

    let push = |heap: &mut BinaryHeap<_>, syms: &[Symbol], l: usize, r: usize| {
        if let Some(&(rank, _)) = ranks.get(&(syms[l].id, syms[r].id)) {
            heap.push(Reverse((rank, l, r, syms[l].id, syms[r].id)));
        }
    };
    for i in 0..n - 1 {
        push(&mut heap, &syms, i, i + 1);
    }

    while let Some(Reverse((_, l, r, lid, rid))) = heap.pop() {
        if !alive[l] || !alive[r] || next[l] != Some(r) || syms[l].id != lid || syms[r].id != rid {
            continue;
        }
        let (_, merged) = ranks[&(lid, rid)];
        let (left, right) = (syms[l], syms[r]);
        syms[l] = Symbol {
            id: merged,
            start: left.start,
            content_start: if left.is_marker_only() {
                right.content_start
            } else {
                left.content_start
            },
            end: right.end,
        };
        alive[r] = false;
        next[l] = next[r];
        if let Some(nn) = next[r] {
            prev[nn] = Some(l);
        }
        if let Some(p) = prev[l] {
            push(&mut heap, &syms, p, l);
        }
        if let Some(nn) = next[l] {
            push(&mut heap, &syms, l, nn);
        }
    }

    let mut out = Vec::new();
    let mut cur = Some(0);
    while let Some(i) = cur {
        out.push(syms[i]);
        cur = next[i];
    }
    out
}

pub fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn parse_byte_token(tok: &str) -> Option<u8> {
    let hex = tok.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

/// Assigns every token whose content intersects a word to that word. Words
/// with no intersecting token (texts that do not match) are dropped.
pub fn align(words: &[NaturalWord], tokens: &[TokenSpan]) -> Vec<WordTokenization> {
    words
        .iter()
        .filter_map(|w| {
            let first = tokens.partition_point(|t| t.end <= w.start);
            let toks: Vec<TokenSpan> = tokens[first..]
                .iter()
                .take_while(|t| t.start < w.end)
                .filter(|t| t.intersects(w.start, w.end))
                .copied()
                .collect();
            (!toks.is_empty()).then(|| WordTokenization {
                word: w.clone(),
                tokens: toks,
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct VocabLine {
    id: usize,
    token: String,
}

pub fn load_vocab(path: &Path, config: TokenizerConfig) -> Result<Vocabulary, TokenizerError> {
    let content = read(path)?;
    let mut slots: Vec<Option<String>> = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: VocabLine =
            serde_json::from_str(line).map_err(|e| TokenizerError::MalformedVocab {
                line: idx + 1,
                message: e.to_string(),
            })?;
        if entry.id >= slots.len() {
            slots.resize(entry.id + 1, None);
        }
        if slots[entry.id].replace(entry.token).is_some() {
            return Err(TokenizerError::DuplicateId(entry.id));
        }
    }
    let tokens = slots
        .into_iter()
        .enumerate()
        .map(|(id, t)| t.ok_or(TokenizerError::MissingId(id)))
        .collect::<Result<Vec<_>, _>>()?;
    Vocabulary::new(tokens, config)
}

/// Parses a merges file: one `LEFT RIGHT` pair per line, rank = line order.
/// Blank lines and a leading `#version` header are ignored.
pub fn load_merges(path: &Path) -> Result<MergeTable, TokenizerError> {
    let content = read(path)?;
    let mut merges = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.is_empty() || (idx == 0 && line.starts_with("#version")) {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                merges.push((l.to_string(), r.to_string()))
            }
            _ => {
                return Err(TokenizerError::MalformedMerge {
                    line: idx + 1,
                    content: line.to_string(),
                })
            }
        }
    }
    Ok(MergeTable::new(merges))
}

pub fn load_tokenizer(
    vocab_path: &Path,
    merges_path: &Path,
    config: TokenizerConfig,
) -> Result<Tokenizer, TokenizerError> {
    let vocab = load_vocab(vocab_path, config)?;
    let merges = load_merges(merges_path)?;
    Tokenizer::new(vocab, merges)
}

fn read(path: &Path) -> Result<String, TokenizerError> {
    fs::read_to_string(path).map_err(|source| TokenizerError::Io {
        path: path.display().to_string(),
        source,
    })
}

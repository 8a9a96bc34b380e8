//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use tokpen::tokenizer::{byte_token, Tokenizer, TokenizerConfig};

pub const MARKER: &str = "\u{2581}";

/// Splits text into pretoken strings the slow way: spaces become markers that
/// open a new piece, other whitespace stands alone.
pub fn oracle_pretokens(text: &str, cfg: &TokenizerConfig) -> Vec<Vec<String>> {
    let marker = cfg.boundary_marker.as_str();
    let mut pieces: Vec<Vec<String>> = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    let flush = |cur: &mut Vec<String>, pieces: &mut Vec<Vec<String>>| {
        if !cur.is_empty() {
            pieces.push(std::mem::take(cur));
        }
    };
    if !marker.is_empty() && cfg.dummy_prefix && !text.is_empty() {
        cur.push(marker.to_string());
    }
    for c in text.chars() {
        if !marker.is_empty() && c == ' ' {
            flush(&mut cur, &mut pieces);
            cur.push(marker.to_string());
        } else if c.is_whitespace() {
            flush(&mut cur, &mut pieces);
            pieces.push(vec![c.to_string()]);
        } else {
            cur.push(c.to_string());
        }
    }
    flush(&mut cur, &mut pieces);
    pieces
}

/// Expands symbols missing from the vocabulary into byte tokens.
fn with_byte_fallback(piece: Vec<String>, vocab: &[String]) -> Vec<String> {
    piece
        .into_iter()
        .flat_map(|s| {
            if vocab.contains(&s) {
                vec![s]
            } else {
                s.bytes().map(byte_token).collect()
            }
        })
        .collect()
}

/// Global-scan BPE: repeatedly merge the lowest-rank adjacent pair, leftmost
/// first, until no listed pair remains.
pub fn oracle_merge(mut syms: Vec<String>, merges: &[(String, String)]) -> Vec<String> {
    loop {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..syms.len().saturating_sub(1) {
            if let Some(rank) = merges
                .iter()
                .position(|(a, b)| *a == syms[i] && *b == syms[i + 1])
            {
                if best.is_none_or(|(r, _)| rank < r) {
                    best = Some((rank, i));
                }
            }
        }
        let Some((_, i)) = best else { return syms };
        let right = syms.remove(i + 1);
        syms[i].push_str(&right);
    }
}

pub fn oracle_encode(
    text: &str,
    vocab: &[String],
    merges: &[(String, String)],
    cfg: &TokenizerConfig,
) -> Vec<String> {
    oracle_pretokens(text, cfg)
        .into_iter()
        .flat_map(|p| {
            let p = if cfg.byte_level { with_byte_fallback(p, vocab) } else { p };
            oracle_merge(p, merges)
        })
        .collect()
}

/// Random BPE tables: base symbols plus merges of random existing tokens,
/// capped at `max_vocab` entries.
pub fn random_bpe(
    rng: &mut ChaCha8Rng,
    base: &[&str],
    max_vocab: usize,
) -> (Vec<String>, Vec<(String, String)>) {
    let mut vocab: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut attempts = 0;
    while vocab.len() < max_vocab && attempts < 500 {
        attempts += 1;
        let a = vocab.choose(rng).unwrap().clone();
        let b = vocab.choose(rng).unwrap().clone();
        let pair = (a.clone(), b.clone());
        if merges.contains(&pair) {
            continue;
        }
        let product = format!("{a}{b}");
        if !vocab.contains(&product) {
            vocab.push(product);
        }
        merges.push(pair);
    }
    (vocab, merges)
}

pub fn random_text(rng: &mut ChaCha8Rng, alphabet: &[char], max_len: usize) -> String {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| *alphabet.choose(rng).unwrap()).collect()
}

pub fn token_strings(tok: &Tokenizer, text: &str) -> Vec<String> {
    tok.encode_ids(text)
        .unwrap()
        .iter()
        .map(|&id| tok.vocab().token(id).unwrap().to_string())
        .collect()
}

/// One-sided pooled t-test p-value from textbook formulas and statrs.
pub fn reference_t_p(c: &[f64], i: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
    };
    let (nc, ni) = (c.len() as f64, i.len() as f64);
    let df = nc + ni - 2.0;
    let sp2 = ((nc - 1.0) * var(c) + (ni - 1.0) * var(i)) / df;
    let t = (mean(i) - mean(c)) / (sp2 * (1.0 / nc + 1.0 / ni)).sqrt();
    StudentsT::new(0.0, 1.0, df).unwrap().sf(t)
}

/// U of the incorrect group by counting pairs.
pub fn pair_count_u(c: &[f64], i: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in i {
        for y in c {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Tie-corrected normal approximation with continuity correction, from
/// pair counts and group sizes.
pub fn reference_mwu_asymptotic_p(c: &[f64], i: &[f64]) -> f64 {
    let u = pair_count_u(c, i);
    // Group equal values; sorting then comparing with == keeps -0.0 and 0.0
    // together, which keying on the bit pattern would not.
    let mut pooled: Vec<f64> = c.iter().chain(i).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut groups: Vec<usize> = Vec::new();
    for (k, v) in pooled.iter().enumerate() {
        if k > 0 && *v == pooled[k - 1] {
            *groups.last_mut().unwrap() += 1;
        } else {
            groups.push(1);
        }
    }
    let (nc, ni) = (c.len() as f64, i.len() as f64);
    let n = nc + ni;
    let tie: f64 = groups.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = nc * ni / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)));
    let z = (u - nc * ni / 2.0 - 0.5) / var.sqrt();
    Normal::new(0.0, 1.0).unwrap().sf(z)
}

/// Exact upper-tail probability of U by assigning the pooled values to the
/// incorrect group in every possible way (bitmask enumeration).
pub fn brute_force_mwu_exact_p(c: &[f64], i: &[f64]) -> f64 {
    let pooled: Vec<f64> = c.iter().chain(i).copied().collect();
    let n = pooled.len();
    let u_obs = pair_count_u(c, i);
    let (mut hits, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != i.len() {
            continue;
        }
        let (mut gi, mut gc) = (Vec::new(), Vec::new());
        for (k, &v) in pooled.iter().enumerate() {
            if mask & (1 << k) != 0 { gi.push(v) } else { gc.push(v) }
        }
        total += 1;
        if pair_count_u(&gc, &gi) >= u_obs {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

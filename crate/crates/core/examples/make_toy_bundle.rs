//! Regenerates the toy asset bundle under `tests/fixtures/toy`.
//!
//! `cargo run --example make_toy_bundle -- crates/core/tests/fixtures/toy`

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tokpen::corpus::{segment_words, InstanceRecord};
use tokpen::embed::{write_embeddings, EmbeddingMatrix};
use tokpen::iforest::{fit, score_vocabulary, write_score_cache, ForestParams};
use tokpen::logprob::{write_logprob_file, LogProbSequence};
use tokpen::tokenizer::{align, Tokenizer, TokenizerConfig};

const MARKER: &str = "\u{2581}";
const UNUSED: usize = 6;

const WHOLE: [&str; 16] = [
    "the", "sand", "in", "heads", "hide", "cat", "and", "is", "a", "of", "city", "which",
    "country", "located", "dog", "run",
];
const RARE: [&str; 12] = [
    "Ostriches", "bury", "waterfall", "Raysko", "Praskalo", "Helsinki", "quixotic", "zephyr",
    "mnemonic", "xylophone", "fjord", "kumquat",
];

fn merges() -> Vec<(String, String)> {
    let mut m: Vec<(String, String)> = [
        (MARKER, "O"),
        ("s", "t"),
        ("st", "r"),
        ("i", "c"),
        ("ic", "h"),
        ("e", "s"),
        (MARKER, "b"),
        ("u", "r"),
        ("ur", "y"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    // whole-word chains: ▁ + w0, ▁w0 + w1, ...
    for w in WHOLE {
        let mut left = MARKER.to_string();
        for c in w.chars() {
            let pair = (left.clone(), c.to_string());
            if !m.contains(&pair) {
                m.push(pair);
            }
            left.push(c);
        }
    }
    m
}

fn vocabulary(merges: &[(String, String)]) -> Vec<String> {
    let mut v: Vec<String> = (0..UNUSED).map(|i| format!("<unused{i}>")).collect();
    v.push(MARKER.to_string());
    let chars = ('a'..='z').chain('A'..='Z').chain('0'..='9').chain(" .,?!'-".chars());
    v.extend(chars.map(|c| c.to_string()));
    for (a, b) in merges {
        let t = format!("{a}{b}");
        if !v.contains(&t) {
            v.push(t);
        }
    }
    v
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(4..9);
    let words: Vec<&str> = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                RARE[rng.random_range(0..RARE.len())]
            } else {
                WHOLE[rng.random_range(0..WHOLE.len())]
            }
        })
        .collect();
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        let up = first.to_uppercase();
        s.replace_range(..1, &up);
    }
    s.push(if rng.random_bool(0.2) { '?' } else { '.' });
    s
}

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "tests/fixtures/toy".into()));
    fs::create_dir_all(&out).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);

    let merges = merges();
    let vocab = vocabulary(&merges);
    let tok = Tokenizer::from_parts(vocab.clone(), merges.clone(), TokenizerConfig::default()).unwrap();

    let mut f = fs::File::create(out.join("vocab.jsonl")).unwrap();
    for (id, token) in vocab.iter().enumerate() {
        writeln!(f, "{}", serde_json::json!({"id": id, "token": token})).unwrap();
    }
    let mut f = fs::File::create(out.join("merges.txt")).unwrap();
    writeln!(f, "#version: toy").unwrap();
    for (a, b) in &merges {
        writeln!(f, "{a} {b}").unwrap();
    }

    // Unused rows sit close to one centroid; everything else is spread out.
    let dim = 8;
    let centroid: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let rows: Vec<Vec<f32>> = (0..vocab.len())
        .map(|id| {
            (0..dim)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    if id < UNUSED {
                        (centroid[j] + 0.05 * noise) as f32
                    } else {
                        noise as f32
                    }
                })
                .collect()
        })
        .collect();
    let emb = EmbeddingMatrix::from_rows(&rows).unwrap();
    write_embeddings(&out.join("embeddings.tpemb"), &emb).unwrap();

    let mut f = fs::File::create(out.join("unused.txt")).unwrap();
    writeln!(f, "# placeholder tokens never produced by the merges").unwrap();
    for id in 0..UNUSED {
        writeln!(f, "{id}").unwrap();
    }

    let params = ForestParams { subsample: 64, trees: 100, seed: 0 };
    let scores = score_vocabulary(&fit(&emb, params).unwrap(), &emb);
    write_score_cache(&out.join("scores.jsonl"), &scores).unwrap();

    let mut texts = vec![
        "Ostriches bury heads in the sand.".to_string(),
        "Ostriches hide heads in the sand.".to_string(),
        "In which country, is the Raysko Praskalo waterfall located?".to_string(),
        "In which country, is the city of Helsinki located?".to_string(),
    ];
    while texts.len() < 60 {
        texts.push(sentence(&mut rng));
    }

    let mut data = fs::File::create(out.join("dataset.jsonl")).unwrap();
    let mut lps = BTreeMap::new();
    for (i, text) in texts.iter().enumerate() {
        let spans = tok.encode(text).unwrap();
        let split = align(&segment_words(text), &spans).iter().filter(|w| w.is_split()).count();
        let p_correct = (0.9 - 0.25 * split as f64).clamp(0.1, 0.9);
        let rec = InstanceRecord {
            id: format!("toy-{i:03}"),
            text: text.clone(),
            correct: rng.random_bool(p_correct),
            words: None,
            logprob_ref: None,
        };
        writeln!(data, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
        let ids: Vec<u32> = spans.iter().map(|s| s.token_id).collect();
        let logprobs = (0..ids.len())
            .map(|p| (p > 0).then(|| rng.random_range(0.05f64..1.0).ln()))
            .collect();
        lps.insert(rec.id, LogProbSequence::new(ids, logprobs).unwrap());
    }
    write_logprob_file(&out.join("logprobs.jsonl"), &lps).unwrap();

    fs::write(
        out.join("run.toml"),
        r#"dataset_name = "toy"
model_name = "toy-bpe"
seed = 0
output_dir = "out"

[paths]
dataset = "dataset.jsonl"
vocab = "vocab.jsonl"
merges = "merges.txt"
embeddings = "embeddings.tpemb"
unused_list = "unused.txt"
logprobs = "logprobs.jsonl"
score_cache = "scores.jsonl"

[forest]
subsample = 64
trees = 100
"#,
    )
    .unwrap();
    println!("wrote toy bundle to {}", out.display());
}

//! Synthetic dataset and penalty dump with a controlled location shift, for
//! closed-loop checks of the statistics stage.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::AppError;
use crate::corpus::InstanceRecord;
use crate::penalty::{write_dump, DumpRow};

/// Column written to synthetic dumps.
pub const SYNTH_COLUMN: &str = "SYN";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub n_correct: usize,
    pub n_incorrect: usize,
    /// Shift of the incorrect group's mean, in units of `sigma`.
    pub delta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_correct: 500,
            n_incorrect: 500,
            delta: 0.3,
            mu: 0.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

/// Correct instances draw from `N(mu, sigma^2)`, incorrect ones from
/// `N(mu + delta*sigma, sigma^2)`. Labels alternate until the smaller group
/// is exhausted so neither group is clustered in file order.
pub fn synth_rows(p: &SynthParams) -> Result<Vec<DumpRow>, AppError> {
    if p.n_correct == 0 || p.n_incorrect == 0 {
        return Err(AppError::Config("synth needs at least one instance per group".into()));
    }
    if !(p.sigma > 0.0) || !p.mu.is_finite() || !p.delta.is_finite() {
        return Err(AppError::Config("synth needs finite mu, delta and sigma > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let c = Normal::new(p.mu, p.sigma).expect("sigma checked");
    let i = Normal::new(p.mu + p.delta * p.sigma, p.sigma).expect("sigma checked");
    let (mut left_c, mut left_i) = (p.n_correct, p.n_incorrect);
    let mut rows = Vec::with_capacity(left_c + left_i);
    while left_c + left_i > 0 {
        let correct = left_i == 0 || (left_c > 0 && rows.len() % 2 == 0);
        let value = if correct { c.sample(&mut rng) } else { i.sample(&mut rng) };
        if correct { left_c -= 1 } else { left_i -= 1 }
        rows.push(DumpRow {
            id: format!("syn-{:06}", rows.len()),
            correct,
            columns: BTreeMap::from([(SYNTH_COLUMN.to_string(), value)]),
            word_tokens: 0,
            words: 0,
        });
    }
    Ok(rows)
}

/// Writes `dataset.jsonl` and `penalties.jsonl` into `out_dir`.
pub fn synth_generate(p: &SynthParams, out_dir: &Path) -> Result<(PathBuf, PathBuf), AppError> {
    let rows = synth_rows(p)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| AppError::Internal(format!("cannot create {}: {e}", out_dir.display())))?;
    let dataset = out_dir.join("dataset.jsonl");
    let dump = out_dir.join("penalties.jsonl");
    let io = |e: std::io::Error| AppError::Internal(format!("writing {}: {e}", dataset.display()));
    let mut w = BufWriter::new(File::create(&dataset).map_err(io)?);
    for r in &rows {
        let rec = InstanceRecord {
            id: r.id.clone(),
            text: format!("synthetic instance {}", r.id),
            correct: r.correct,
            words: None,
            logprob_ref: None,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("plain struct")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    write_dump(&dump, &rows).map_err(AppError::from_penalty)?;
    Ok((dataset, dump))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_sizes_and_determinism() {
        let p = SynthParams {
            n_correct: 7,
            n_incorrect: 3,
            seed: 11,
            ..SynthParams::default()
        };
        let a = synth_rows(&p).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.iter().filter(|r| r.correct).count(), 7);
        assert_eq!(a, synth_rows(&p).unwrap());
        let b = synth_rows(&SynthParams { seed: 12, ..p }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn shift_moves_incorrect_mean() {
        let p = SynthParams {
            n_correct: 4000,
            n_incorrect: 4000,
            delta: 2.0,
            mu: 1.0,
            sigma: 0.5,
            seed: 3,
        };
        let rows = synth_rows(&p).unwrap();
        let mean = |correct: bool| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.correct == correct)
                .map(|r| r.columns[SYNTH_COLUMN])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((mean(true) - 1.0).abs() < 0.05);
        assert!((mean(false) - 2.0).abs() < 0.05);
    }

    #[test]
    fn rejects_empty_groups() {
        let p = SynthParams {
            n_incorrect: 0,
            ..SynthParams::default()
        };
        assert!(matches!(synth_rows(&p), Err(AppError::Config(_))));
    }

    #[test]
    fn files_are_identical_across_runs() {
        let p = SynthParams {
            n_correct: 20,
            n_incorrect: 20,
            ..SynthParams::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (da, pa) = synth_generate(&p, a.path()).unwrap();
        let (db, pb) = synth_generate(&p, b.path()).unwrap();
        assert_eq!(std::fs::read(da).unwrap(), std::fs::read(db).unwrap());
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }
}

//! One-sided two-sample tests (is the incorrect set's penalty larger?), decile
//! accuracy analysis, fertility, and the results grid over a penalty dump.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::penalty::DumpRow;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} values per group, have {n_correct} correct and {n_incorrect} incorrect")]
    InsufficientSamples {
        needed: usize,
        n_correct: usize,
        n_incorrect: usize,
    },
    #[error("zero variance: the t statistic is undefined")]
    ZeroVariance,
    #[error("all values are tied: the rank statistic has no spread")]
    AllTied,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("decile analysis needs at least 10 instances, got {0}")]
    TooFewInstances(usize),
    #[error("fertility is undefined without natural words")]
    NoWords,
}

/// Penalty samples split by the correctness label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSplit {
    pub correct: Vec<f64>,
    pub incorrect: Vec<f64>,
}

impl SampleSplit {
    pub fn new(correct: Vec<f64>, incorrect: Vec<f64>) -> Result<Self, StatsError> {
        if correct.iter().chain(&incorrect).any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(Self { correct, incorrect })
    }

    pub fn from_labeled(values: impl IntoIterator<Item = (f64, bool)>) -> Result<Self, StatsError> {
        let (mut c, mut i) = (Vec::new(), Vec::new());
        for (v, correct) in values {
            if correct { c.push(v) } else { i.push(v) }
        }
        Self::new(c, i)
    }

    fn require(&self, needed: usize) -> Result<(), StatsError> {
        if self.correct.len() < needed || self.incorrect.len() < needed {
            return Err(StatsError::InsufficientSamples {
                needed,
                n_correct: self.correct.len(),
                n_incorrect: self.incorrect.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    TTest,
    WelchTTest,
    MwuExact,
    MwuAsymptotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variance {
    #[default]
    Pooled,
    Welch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub significant_05: bool,
    pub significant_10: bool,
}

impl TestResult {
    fn new(statistic: f64, p_value: f64, method: TestMethod, split: &SampleSplit) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        Self {
            statistic,
            p_value,
            method,
            n_correct: split.correct.len(),
            n_incorrect: split.incorrect.len(),
            significant_05: p_value < 0.05,
            significant_10: p_value < 0.10,
        }
    }
}

/// Regularized incomplete beta `I_x(a, b)`, continued fraction evaluated to a
/// relative change below 1e-14.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * x.ln()
        + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-300;
    const MAX_ITER: usize = 10_000;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Upper tail `P(T > t)` of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    let half = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 { half } else { 1.0 - half }
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, ss / (n - 1.0))
}

/// One-sided two-sample t-test of "incorrect has the larger mean".
pub fn t_test_one_sided(split: &SampleSplit, variance: Variance) -> Result<TestResult, StatsError> {
    split.require(2)?;
    let (mc, vc) = mean_var(&split.correct);
    let (mi, vi) = mean_var(&split.incorrect);
    let (nc, ni) = (split.correct.len() as f64, split.incorrect.len() as f64);
    let (se, df, method) = match variance {
        Variance::Pooled => {
            let df = nc + ni - 2.0;
            let sp2 = ((ni - 1.0) * vi + (nc - 1.0) * vc) / df;
            ((sp2 * (1.0 / ni + 1.0 / nc)).sqrt(), df, TestMethod::TTest)
        }
        Variance::Welch => {
            let (a, b) = (vi / ni, vc / nc);
            let df = (a + b).powi(2) / (a * a / (ni - 1.0) + b * b / (nc - 1.0));
            ((a + b).sqrt(), df, TestMethod::WelchTTest)
        }
    };
    if !(se > 0.0) {
        return Err(StatsError::ZeroVariance);
    }
    let t = (mi - mc) / se;
    Ok(TestResult::new(t, student_t_sf(t, df), method, split))
}

/// Midranks (1-based) of `values`, and the sizes of tie groups.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

pub const EXACT_MAX_GROUP: usize = 8;

/// One-sided Mann–Whitney U of "incorrect tends larger". Exact for small,
/// tie-free samples; otherwise the tie-corrected normal approximation with
/// continuity correction.
pub fn mwu_one_sided(split: &SampleSplit) -> Result<TestResult, StatsError> {
    split.require(1)?;
    let (nc, ni) = (split.correct.len(), split.incorrect.len());
    let all: Vec<f64> = split.incorrect.iter().chain(&split.correct).copied().collect();
    let (ranks, ties) = midranks(&all);
    let rank_sum: f64 = ranks[..ni].iter().sum();
    let u = rank_sum - (ni * (ni + 1)) as f64 / 2.0;

    if nc <= EXACT_MAX_GROUP && ni <= EXACT_MAX_GROUP && ties.is_empty() {
        let p = exact_upper_tail(ni, nc, u as u64);
        return Ok(TestResult::new(u, p, TestMethod::MwuExact, split));
    }

    let n = (nc + ni) as f64;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = (ni * nc) as f64 / 12.0 * ((n + 1.0) - tie_term);
    if !(var > 0.0) {
        return Err(StatsError::AllTied);
    }
    let z = (u - (ni * nc) as f64 / 2.0 - 0.5) / var.sqrt();
    Ok(TestResult::new(u, normal_sf(z), TestMethod::MwuAsymptotic, split))
}

/// `P(U >= u)` when the incorrect group's ranks are a uniformly random
/// `ni`-subset of `1..=ni+nc`, by enumerating every subset.
fn exact_upper_tail(ni: usize, nc: usize, u: u64) -> f64 {
    let n = ni + nc;
    let offset = (ni * (ni + 1) / 2) as u64;
    let mut idx: Vec<usize> = (0..ni).collect();
    let (mut hits, mut total) = (0u64, 0u64);
    loop {
        let rank_sum: u64 = idx.iter().map(|&i| i as u64 + 1).sum();
        total += 1;
        if rank_sum - offset >= u {
            hits += 1;
        }
        // advance to the next combination in lexicographic order
        let Some(pos) = (0..ni).rev().find(|&p| idx[p] < n - ni + p) else {
            break;
        };
        idx[pos] += 1;
        for q in pos + 1..ni {
            idx[q] = idx[q - 1] + 1;
        }
    }
    hits as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecileResult {
    pub n: usize,
    pub decile_size: usize,
    pub acc_top: f64,
    pub acc_bottom: f64,
    pub diff: f64,
}

/// Accuracy in the highest- and lowest-penalty tenths. Sorting is stable, so
/// tied penalties keep their input order.
pub fn decile_analysis(instances: &[(f64, bool)]) -> Result<DecileResult, StatsError> {
    let n = instances.len();
    if n < 10 {
        return Err(StatsError::TooFewInstances(n));
    }
    let mut sorted = instances.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let size = (n / 10).max(1);
    let acc = |part: &[(f64, bool)]| part.iter().filter(|x| x.1).count() as f64 / part.len() as f64;
    let acc_top = acc(&sorted[..size]);
    let acc_bottom = acc(&sorted[n - size..]);
    Ok(DecileResult {
        n,
        decile_size: size,
        acc_top,
        acc_bottom,
        diff: acc_bottom - acc_top,
    })
}

/// Tokens per natural word from per-instance `(word_tokens, words)` terms.
pub fn fertility(terms: &[(usize, usize)]) -> Result<f64, StatsError> {
    let tokens: usize = terms.iter().map(|t| t.0).sum();
    let words: usize = terms.iter().map(|t| t.1).sum();
    if words == 0 {
        return Err(StatsError::NoWords);
    }
    Ok(tokens as f64 / words as f64)
}

/// One cell of the results grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub dataset: String,
    pub model: String,
    pub column: String,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub t_test: Result<TestResult, StatsError>,
    pub mwu: Result<TestResult, StatsError>,
    pub decile: Result<DecileResult, StatsError>,
}

impl GridRow {
    /// `(function, aggregation)` from a column name such as `CP_top3`; columns
    /// without an aggregation suffix (B1, B2, PPL) report `-`.
    pub fn function_and_aggregation(&self) -> (&str, &str) {
        self.column
            .rsplit_once('_')
            .unwrap_or((self.column.as_str(), "-"))
    }
}

/// Runs both tests and the decile analysis on every column of the dump.
/// Rows are ordered by column name.
pub fn evaluate_grid(
    dataset: &str,
    model: &str,
    rows: &[DumpRow],
    variance: Variance,
) -> Vec<GridRow> {
    let columns: BTreeSet<&String> = rows.iter().flat_map(|r| r.columns.keys()).collect();
    columns
        .into_par_iter()
        .map(|col| {
            let labeled: Vec<(f64, bool)> = rows
                .iter()
                .filter_map(|r| r.columns.get(col).map(|&v| (v, r.correct)))
                .collect();
            let n_correct = labeled.iter().filter(|x| x.1).count();
            let split = SampleSplit::from_labeled(labeled.iter().copied());
            let (t_test, mwu) = match &split {
                Ok(s) => (t_test_one_sided(s, variance), mwu_one_sided(s)),
                Err(e) => (Err(e.clone()), Err(e.clone())),
            };
            GridRow {
                dataset: dataset.to_string(),
                model: model.to_string(),
                column: col.clone(),
                accuracy: if labeled.is_empty() { 0.0 } else { n_correct as f64 / labeled.len() as f64 },
                n_correct,
                n_incorrect: labeled.len() - n_correct,
                t_test,
                mwu,
                decile: decile_analysis(&labeled),
            }
        })
        .collect()
}

fn marker(r: &Result<TestResult, StatsError>) -> &'static str {
    match r {
        Ok(t) if t.significant_05 => "**",
        Ok(t) if t.significant_10 => "*",
        Ok(_) => "ns",
        Err(_) => "NA",
    }
}

fn p_cell(r: &Result<TestResult, StatsError>) -> String {
    r.as_ref().map_or("NA".into(), |t| t.p_value.to_string())
}

pub const RESULTS_HEADER: &str =
    "dataset\tmodel\tfunction\taggregation\taccuracy\tt_p\tmwu_p\tn_C\tn_I\tt_sig\tmwu_sig";

/// Results TSV: `**` marks p < 0.05, `*` marks p < 0.10, `NA` a test that
/// could not run.
pub fn write_results_tsv(path: &Path, rows: &[GridRow]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        let (f, agg) = r.function_and_aggregation();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.dataset,
            r.model,
            f,
            agg,
            r.accuracy,
            p_cell(&r.t_test),
            p_cell(&r.mwu),
            r.n_correct,
            r.n_incorrect,
            marker(&r.t_test),
            marker(&r.mwu),
        )?;
    }
    w.flush()
}

pub fn write_decile_csv(path: &Path, rows: &[GridRow]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "dataset,model,column,n,decile_size,acc_top,acc_bottom,diff")?;
    for r in rows {
        if let Ok(d) = &r.decile {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.dataset, r.model, r.column, d.n, d.decile_size, d.acc_top, d.acc_bottom, d.diff
            )?;
        }
    }
    w.flush()
}

//! End-to-end stages: score a dataset, test the resulting dump, summarize
//! fertility, and record a manifest.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{Conditioning, RunConfig};
use super::AppError;
use crate::corpus::{effective_words, load_dataset, InstanceRecord};
use crate::embed::{load_embeddings, load_unused_list, unused_token_set, EmbeddingMatrix};
use crate::iforest::{fit, load_score_cache, score_vocabulary, write_score_cache, ForestParams};
use crate::logprob::{
    fetch_all, load_logprob_file, write_logprob_file, CompletionsClient, FetchItem, FirstTokenPolicy,
    LogProbSequence,
};
use crate::penalty::{score_instance, write_dump, DumpRow, PenaltyAssets, PenaltyFunction};
use crate::stats::{evaluate_grid, fertility, write_decile_csv, write_results_tsv, GridRow, Variance};
use crate::tokenizer::{align, load_tokenizer, TokenId, Tokenizer};

pub const DUMP_FILE: &str = "penalties.jsonl";
pub const RESULTS_FILE: &str = "results.tsv";
pub const DECILE_FILE: &str = "deciles.csv";
pub const FERTILITY_CSV: &str = "fertility.csv";
pub const FERTILITY_JSON: &str = "fertility.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FETCHED_LOGPROBS_FILE: &str = "logprobs.jsonl";

pub const DECILE_TIE_RULE: &str =
    "stable sort by penalty, descending; ties keep dump order (instance id ascending)";

pub fn sha256_file(path: &Path) -> Result<String, AppError> {
    let bytes = fs::read(path)
        .map_err(|e| AppError::Internal(format!("cannot hash {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssetRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForestRecord {
    pub subsample: usize,
    pub trees: usize,
    pub seed: u64,
    pub scores: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmittedFunction {
    pub function: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: Option<String>,
    pub config: Option<String>,
    pub seed: u64,
    pub dataset_name: String,
    pub model_name: String,
    pub assets: BTreeMap<String, AssetRecord>,
    pub forest: Option<ForestRecord>,
    pub logprob_source: &'static str,
    pub logprob_conditioning: Option<Conditioning>,
    pub first_token_policy: String,
    pub variance: Variance,
    pub functions_computed: Vec<String>,
    pub functions_omitted: Vec<OmittedFunction>,
    pub decile_tie_rule: &'static str,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &str, dataset: &str, model: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_sha256: None,
            config: None,
            seed: 0,
            dataset_name: dataset.to_string(),
            model_name: model.to_string(),
            assets: BTreeMap::new(),
            forest: None,
            logprob_source: "none",
            logprob_conditioning: None,
            first_token_policy: String::new(),
            variance: Variance::Pooled,
            functions_computed: Vec::new(),
            functions_omitted: Vec::new(),
            decile_tie_rule: DECILE_TIE_RULE,
            outputs: BTreeMap::new(),
        }
    }

    fn add_asset(&mut self, name: &str, path: &Path) -> Result<(), AppError> {
        let sha256 = sha256_file(path)?;
        self.assets.insert(
            name.to_string(),
            AssetRecord {
                path: path.display().to_string(),
                sha256,
            },
        );
        Ok(())
    }

    fn add_output(&mut self, path: &Path) -> Result<(), AppError> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.outputs.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, AppError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n")
            .map_err(|e| AppError::Internal(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn policy_label(p: FirstTokenPolicy) -> String {
    match p {
        FirstTokenPolicy::Floor(f) => format!("floor({f})"),
        FirstTokenPolicy::Skip => "skip".into(),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), AppError> {
    fs::create_dir_all(dir)
        .map_err(|e| AppError::Internal(format!("cannot create {}: {e}", dir.display())))
}

fn io_out(path: &Path) -> impl Fn(std::io::Error) -> AppError + '_ {
    move |e| AppError::Internal(format!("cannot write {}: {e}", path.display()))
}

/// Default score-cache location beside the embedding file.
pub fn default_score_cache(embeddings: &Path, params: ForestParams) -> PathBuf {
    let mut name = embeddings.as_os_str().to_owned();
    name.push(format!(".if-{}-{}-{}.jsonl", params.subsample, params.trees, params.seed));
    PathBuf::from(name)
}

/// Output of the scoring stage, before anything is written.
pub struct Scored {
    pub rows: Vec<DumpRow>,
    pub manifest: Manifest,
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, AppError> {
    p.as_deref()
        .ok_or_else(|| AppError::Config(format!("paths.{what} is required")))
}

fn load_core(cfg: &RunConfig) -> Result<(Tokenizer, Vec<InstanceRecord>), AppError> {
    let vocab = required(&cfg.paths.vocab, "vocab")?;
    let merges = required(&cfg.paths.merges, "merges")?;
    let tok = load_tokenizer(vocab, merges, cfg.tokenizer.clone())
        .map_err(|e| AppError::Asset(format!("tokenizer: {e}")))?;
    let records = load_dataset(required(&cfg.paths.dataset, "dataset")?)
        .map_err(|e| AppError::Asset(format!("corpus: {e}")))?;
    Ok((tok, records))
}

fn anomaly_table(
    cfg: &RunConfig,
    emb_path: &Path,
    emb: &EmbeddingMatrix,
    manifest: &mut Manifest,
) -> Result<Vec<f64>, AppError> {
    let mut params = cfg.forest_params();
    if params.subsample > emb.rows() {
        log::warn!(
            "forest subsample {} exceeds {} embedding rows; using {}",
            params.subsample,
            emb.rows(),
            emb.rows()
        );
        params.subsample = emb.rows();
    }
    let cache = cfg
        .paths
        .score_cache
        .clone()
        .unwrap_or_else(|| default_score_cache(emb_path, params));
    let scores = if cache.exists() {
        let s = load_score_cache(&cache).map_err(|e| AppError::Asset(format!("iforest: {e}")))?;
        if s.len() != emb.rows() {
            return Err(AppError::Asset(format!(
                "iforest: score cache {} has {} rows, embeddings have {}",
                cache.display(),
                s.len(),
                emb.rows()
            )));
        }
        s
    } else {
        let model = fit(emb, params).map_err(|e| AppError::Asset(format!("iforest: {e}")))?;
        let s = score_vocabulary(&model, emb);
        write_score_cache(&cache, &s).map_err(|e| AppError::Asset(format!("iforest: {e}")))?;
        s
    };
    manifest.add_asset("score_cache", &cache)?;
    manifest.forest = Some(ForestRecord {
        subsample: params.subsample,
        trees: params.trees,
        seed: params.seed,
        scores: if cfg.penalty.raw_anomaly { "raw" } else { "normalized" },
    });
    Ok(if cfg.penalty.raw_anomaly { scores.raw } else { scores.normalized })
}

fn fetch_logprobs_http(
    cfg: &RunConfig,
    tok: &Tokenizer,
    records: &[InstanceRecord],
) -> Result<BTreeMap<String, LogProbSequence>, AppError> {
    let client = CompletionsClient::new(cfg.provider.clone())
        .map_err(|e| AppError::Provider(format!("logprob: {e}")))?;
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for r in records {
        if !seen.insert(r.logprob_key()) {
            continue;
        }
        let token_ids = tok
            .encode_ids(&r.text)
            .map_err(|e| AppError::Asset(format!("tokenizer: instance {:?}: {e}", r.id)))?;
        items.push(FetchItem {
            id: r.logprob_key(),
            text: &r.text,
            token_ids,
        });
    }
    let mut out = BTreeMap::new();
    let mut failures = Vec::new();
    for (id, res) in fetch_all(&client, &items, tok.vocab()) {
        match res {
            Ok(seq) => {
                out.insert(id, seq);
            }
            Err(e) => failures.push(format!("{id:?}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(AppError::Provider(format!(
            "logprob: {} of {} instances failed; first: {}",
            failures.len(),
            items.len(),
            failures[0]
        )));
    }
    Ok(out)
}

/// Loads assets and scores every instance. Rows are ordered by instance id.
pub fn score_dataset(cfg: &RunConfig, command: &str) -> Result<Scored, AppError> {
    cfg.validate()?;
    let pcfg = cfg.penalty_config()?;
    let mut manifest = Manifest::new(command, &cfg.dataset_name, &cfg.model_name);
    let canonical = cfg.canonical();
    manifest.config_sha256 = Some(hex::encode(Sha256::digest(canonical.as_bytes())));
    manifest.config = Some(canonical);
    manifest.seed = cfg.seed;
    manifest.first_token_policy = policy_label(pcfg.first_token);
    manifest.variance = cfg.variance;

    let (tok, records) = load_core(cfg)?;
    for (name, p) in [
        ("dataset", &cfg.paths.dataset),
        ("vocab", &cfg.paths.vocab),
        ("merges", &cfg.paths.merges),
    ] {
        manifest.add_asset(name, p.as_deref().expect("validated"))?;
    }

    let mut omitted: Vec<(PenaltyFunction, &str)> = Vec::new();
    let wants = |f| pcfg.functions.contains(&f);

    let embeddings = match &cfg.paths.embeddings {
        Some(p) => {
            let emb = load_embeddings(p).map_err(|e| AppError::Asset(format!("embed: {e}")))?;
            if emb.rows() != tok.vocab().size() {
                return Err(AppError::Asset(format!(
                    "embed: {} rows but vocabulary has {} entries",
                    emb.rows(),
                    tok.vocab().size()
                )));
            }
            manifest.add_asset("embeddings", p)?;
            Some((p.clone(), emb))
        }
        None => None,
    };

    let anomaly = match (&embeddings, wants(PenaltyFunction::AS)) {
        (Some((p, emb)), true) => Some(anomaly_table(cfg, p, emb, &mut manifest)?),
        (None, true) => {
            omitted.push((PenaltyFunction::AS, "no embeddings configured"));
            None
        }
        _ => None,
    };

    let unused = match (&embeddings, wants(PenaltyFunction::UT)) {
        (Some((_, emb)), true) => {
            let set = match &cfg.paths.unused_list {
                Some(p) => {
                    let ids = load_unused_list(p).map_err(|e| AppError::Asset(format!("embed: {e}")))?;
                    manifest.add_asset("unused_list", p)?;
                    unused_token_set(emb, Some(&ids), None)
                }
                None => {
                    log::warn!("no unused-token list; treating tokens absent from the dataset as unused");
                    let mut seen: HashSet<TokenId> = HashSet::new();
                    for r in &records {
                        let ids = tok.encode_ids(&r.text).map_err(|e| {
                            AppError::Asset(format!("tokenizer: instance {:?}: {e}", r.id))
                        })?;
                        seen.extend(ids);
                    }
                    unused_token_set(emb, None, Some(&seen))
                }
            };
            Some(set.map_err(|e| AppError::Asset(format!("embed: {e}")))?)
        }
        (None, true) => {
            omitted.push((PenaltyFunction::UT, "no embeddings configured"));
            None
        }
        _ => None,
    };
    if wants(PenaltyFunction::PD) && embeddings.is_none() {
        omitted.push((PenaltyFunction::PD, "no embeddings configured"));
    }

    let logprobs = if let Some(p) = &cfg.paths.logprobs {
        manifest.logprob_source = "file";
        manifest.add_asset("logprobs", p)?;
        Some(load_logprob_file(p).map_err(|e| AppError::Asset(format!("logprob: {e}")))?)
    } else if cfg.uses_http() {
        manifest.logprob_source = "http";
        let seqs = fetch_logprobs_http(cfg, &tok, &records)?;
        ensure_dir(&cfg.output_dir)?;
        let path = cfg.output_dir.join(FETCHED_LOGPROBS_FILE);
        write_logprob_file(&path, &seqs).map_err(|e| AppError::Internal(format!("logprob: {e}")))?;
        manifest.add_output(&path)?;
        Some(seqs)
    } else {
        None
    };
    if logprobs.is_some() {
        manifest.logprob_conditioning = Some(cfg.logprob_conditioning);
    }

    for (f, why) in &omitted {
        log::warn!("{f} omitted: {why}");
    }

    let assets = PenaltyAssets {
        tokenizer: &tok,
        embeddings: embeddings.as_ref().map(|(_, e)| e),
        anomaly: anomaly.as_deref(),
        unused: unused.as_ref(),
        logprobs: logprobs.as_ref(),
    };
    manifest.functions_computed = pcfg
        .functions
        .iter()
        .filter(|f| assets.supports(**f))
        .map(|f| f.name().to_string())
        .collect();
    manifest.functions_omitted = omitted
        .iter()
        .map(|(f, why)| OmittedFunction {
            function: f.name().to_string(),
            reason: why.to_string(),
        })
        .collect();

    let mut rows: Vec<DumpRow> = records
        .par_iter()
        .map(|r| {
            score_instance(r, &assets, &pcfg)
                .map(|p| DumpRow::from(&p))
                .map_err(|e| AppError::Asset(format!("penalty: {e}")))
        })
        .collect::<Result<_, _>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Scored { rows, manifest })
}

/// Results TSV and decile CSV for a dump; returns the grid.
pub fn test_rows(
    dataset: &str,
    model: &str,
    rows: &[DumpRow],
    variance: Variance,
    out_dir: &Path,
    manifest: &mut Manifest,
) -> Result<Vec<GridRow>, AppError> {
    ensure_dir(out_dir)?;
    let grid = evaluate_grid(dataset, model, rows, variance);
    for r in &grid {
        if let Err(e) = &r.t_test {
            log::warn!("{}: t-test not run: {e}", r.column);
        }
        if let Err(e) = &r.mwu {
            log::warn!("{}: Mann-Whitney U not run: {e}", r.column);
        }
    }
    let results = out_dir.join(RESULTS_FILE);
    write_results_tsv(&results, &grid).map_err(io_out(&results))?;
    manifest.add_output(&results)?;
    let deciles = out_dir.join(DECILE_FILE);
    write_decile_csv(&deciles, &grid).map_err(io_out(&deciles))?;
    manifest.add_output(&deciles)?;
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FertilitySummary {
    pub dataset: String,
    pub model: String,
    pub fertility: f64,
    pub word_tokens: usize,
    pub words: usize,
    /// Grid cells tested, and how many reached p < 0.05 per test.
    pub cells: usize,
    pub t_significant_05: usize,
    pub mwu_significant_05: usize,
}

pub fn fertility_summary(
    dataset: &str,
    model: &str,
    terms: &[(usize, usize)],
    grid: &[GridRow],
) -> Result<FertilitySummary, AppError> {
    let f = fertility(terms).map_err(|e| AppError::Asset(format!("stats: {e}")))?;
    let sig = |pick: fn(&GridRow) -> bool| grid.iter().filter(|r| pick(r)).count();
    Ok(FertilitySummary {
        dataset: dataset.to_string(),
        model: model.to_string(),
        fertility: f,
        word_tokens: terms.iter().map(|t| t.0).sum(),
        words: terms.iter().map(|t| t.1).sum(),
        cells: grid.len(),
        t_significant_05: sig(|r| r.t_test.as_ref().is_ok_and(|t| t.significant_05)),
        mwu_significant_05: sig(|r| r.mwu.as_ref().is_ok_and(|t| t.significant_05)),
    })
}

pub fn write_fertility(
    out_dir: &Path,
    s: &FertilitySummary,
    manifest: &mut Manifest,
) -> Result<(), AppError> {
    ensure_dir(out_dir)?;
    let csv = out_dir.join(FERTILITY_CSV);
    let text = format!(
        "dataset,model,fertility,word_tokens,words,cells,t_significant_05,mwu_significant_05\n{},{},{},{},{},{},{},{}\n",
        s.dataset, s.model, s.fertility, s.word_tokens, s.words, s.cells, s.t_significant_05, s.mwu_significant_05
    );
    fs::write(&csv, text).map_err(io_out(&csv))?;
    manifest.add_output(&csv)?;
    let json = out_dir.join(FERTILITY_JSON);
    let text = serde_json::to_string_pretty(s).expect("plain struct") + "\n";
    fs::write(&json, text).map_err(io_out(&json))?;
    manifest.add_output(&json)?;
    Ok(())
}

/// Fertility terms straight from the tokenizer, without any penalty assets.
pub fn dataset_fertility_terms(cfg: &RunConfig) -> Result<Vec<(usize, usize)>, AppError> {
    let (tok, records) = load_core(cfg)?;
    records
        .par_iter()
        .map(|r| {
            let spans = tok
                .encode(&r.text)
                .map_err(|e| AppError::Asset(format!("tokenizer: instance {:?}: {e}", r.id)))?;
            let words =
                effective_words(r).map_err(|e| AppError::Asset(format!("corpus: {e}")))?;
            let aligned = align(&words, &spans);
            Ok((aligned.iter().map(|w| w.k()).sum(), aligned.len()))
        })
        .collect()
}

fn write_dump_file(out_dir: &Path, rows: &[DumpRow], m: &mut Manifest) -> Result<PathBuf, AppError> {
    ensure_dir(out_dir)?;
    let path = out_dir.join(DUMP_FILE);
    write_dump(&path, rows).map_err(|e| AppError::Internal(format!("penalty: {e}")))?;
    m.add_output(&path)?;
    Ok(path)
}

/// `score`: penalty dump and manifest.
pub fn run_score(cfg: &RunConfig) -> Result<Manifest, AppError> {
    let Scored { rows, mut manifest } = score_dataset(cfg, "score")?;
    write_dump_file(&cfg.output_dir, &rows, &mut manifest)?;
    manifest.write(&cfg.output_dir)?;
    Ok(manifest)
}

/// `run`: scoring, the statistics grid, deciles, fertility and manifest.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Manifest, AppError> {
    let Scored { rows, mut manifest } = score_dataset(cfg, "run")?;
    let out = &cfg.output_dir;
    write_dump_file(out, &rows, &mut manifest)?;
    let grid = test_rows(&cfg.dataset_name, &cfg.model_name, &rows, cfg.variance, out, &mut manifest)?;
    let terms: Vec<(usize, usize)> = rows.iter().map(|r| (r.word_tokens, r.words)).collect();
    match fertility_summary(&cfg.dataset_name, &cfg.model_name, &terms, &grid) {
        Ok(s) => write_fertility(out, &s, &mut manifest)?,
        Err(e) => log::warn!("fertility not written: {e}"),
    }
    manifest.write(out)?;
    Ok(manifest)
}

/// `test`: statistics from an existing dump.
pub fn run_test(
    dump: &Path,
    dataset: &str,
    model: &str,
    variance: Variance,
    out_dir: &Path,
) -> Result<Manifest, AppError> {
    let rows = crate::penalty::load_dump(dump).map_err(|e| AppError::Asset(format!("penalty: {e}")))?;
    let mut manifest = Manifest::new("test", dataset, model);
    manifest.variance = variance;
    manifest.add_asset("dump", dump)?;
    let grid = test_rows(dataset, model, &rows, variance, out_dir, &mut manifest)?;
    let terms: Vec<(usize, usize)> = rows.iter().map(|r| (r.word_tokens, r.words)).collect();
    if terms.iter().any(|t| t.1 > 0) {
        let s = fertility_summary(dataset, model, &terms, &grid)?;
        write_fertility(out_dir, &s, &mut manifest)?;
    }
    manifest.write(out_dir)?;
    Ok(manifest)
}

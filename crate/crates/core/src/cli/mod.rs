//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 asset error, 4 provider
//! error, 5 internal error.

pub mod config;
pub mod pipeline;
pub mod synth;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::penalty::PenaltyError;
use crate::stats::Variance;
use config::{FirstToken, RunConfig};
use synth::SynthParams;

#[derive(Error, Debug)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("asset error: {0}")]
    Asset(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Asset(_) => 3,
            AppError::Provider(_) => 4,
            AppError::Internal(_) => 5,
        }
    }

    pub(crate) fn from_penalty(e: PenaltyError) -> Self {
        match e {
            PenaltyError::Io { .. } => AppError::Internal(format!("penalty: {e}")),
            _ => AppError::Asset(format!("penalty: {e}")),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tokpen", version, about = "Tokenization penalties and their correlation with model errors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute per-instance penalties and write the penalty dump.
    Score(RunArgs),
    /// Run the statistical tests on an existing penalty dump.
    Test(TestArgs),
    /// Score, test, and write deciles, fertility and the manifest.
    Run(RunArgs),
    /// Generate a synthetic dataset and penalty dump.
    Synth(SynthArgs),
    /// Tokens per natural word for a dataset, or from a penalty dump.
    Fertility(FertilityArgs),
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub merges: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub unused_list: Option<PathBuf>,
    #[arg(long)]
    pub logprobs: Option<PathBuf>,
    #[arg(long)]
    pub score_cache: Option<PathBuf>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated subset of AS,UT,PD,CP.
    #[arg(long, value_delimiter = ',')]
    pub functions: Option<Vec<String>>,
    /// Comma-separated subset of sum,avg,max,top,topN.
    #[arg(long, value_delimiter = ',')]
    pub aggregations: Option<Vec<String>>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Weight every word 1 in CP.
    #[arg(long)]
    pub no_pos_weights: bool,
    /// How an absent first-token log-prob is treated.
    #[arg(long, value_parser = ["floor", "skip"])]
    pub first_token: Option<String>,
    #[arg(long)]
    pub if_psi: Option<usize>,
    #[arg(long)]
    pub if_trees: Option<usize>,
    #[arg(long)]
    pub if_seed: Option<u64>,
    /// Use raw anomaly scores in AS instead of normalized ones.
    #[arg(long)]
    pub if_raw: bool,
    /// Welch's unequal-variance t-test instead of the pooled one.
    #[arg(long)]
    pub welch: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, AppError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let paths = &mut cfg.paths;
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut paths.dataset, &self.dataset);
        set(&mut paths.vocab, &self.vocab);
        set(&mut paths.merges, &self.merges);
        set(&mut paths.embeddings, &self.embeddings);
        set(&mut paths.unused_list, &self.unused_list);
        set(&mut paths.logprobs, &self.logprobs);
        set(&mut paths.score_cache, &self.score_cache);
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(v) = &self.dataset_name {
            cfg.dataset_name = v.clone();
        }
        if let Some(v) = &self.model_name {
            cfg.model_name = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.functions {
            cfg.penalty.functions = v.clone();
        }
        if let Some(v) = &self.aggregations {
            cfg.penalty.aggregations = v.clone();
        }
        if let Some(v) = self.top_k {
            cfg.penalty.top_k = v;
        }
        if self.no_pos_weights {
            cfg.penalty.pos_weighting = false;
        }
        if let Some(v) = &self.first_token {
            cfg.penalty.first_token = if v == "skip" { FirstToken::Skip } else { FirstToken::Floor };
        }
        if let Some(v) = self.if_psi {
            cfg.forest.subsample = v;
        }
        if let Some(v) = self.if_trees {
            cfg.forest.trees = v;
        }
        if let Some(v) = self.if_seed {
            cfg.forest.seed = Some(v);
        }
        if self.if_raw {
            cfg.penalty.raw_anomaly = true;
        }
        if self.welch {
            cfg.variance = Variance::Welch;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TestArgs {
    /// Penalty dump (JSON lines) produced by `score` or `synth`.
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value = "dataset")]
    pub dataset_name: String,
    #[arg(long, default_value = "model")]
    pub model_name: String,
    #[arg(long)]
    pub welch: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n_correct: usize,
    #[arg(long, default_value_t = 500)]
    pub n_incorrect: usize,
    /// Mean shift of the incorrect group, in standard deviations.
    #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FertilityArgs {
    /// Read fertility terms from a penalty dump instead of tokenizing.
    #[arg(long, conflicts_with = "config")]
    pub dump: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Executes a parsed command line.
pub fn execute(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::Score(a) => {
            let cfg = a.resolve()?;
            let m = pipeline::run_score(&cfg)?;
            println!("wrote {} to {}", pipeline::DUMP_FILE, cfg.output_dir.display());
            report_omitted(&m);
        }
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let m = pipeline::run_pipeline(&cfg)?;
            println!("wrote {} outputs to {}", m.outputs.len() + 1, cfg.output_dir.display());
            report_omitted(&m);
        }
        Command::Test(a) => {
            let variance = if a.welch { Variance::Welch } else { Variance::Pooled };
            pipeline::run_test(&a.dump, &a.dataset_name, &a.model_name, variance, &a.out)?;
            println!("wrote {} to {}", pipeline::RESULTS_FILE, a.out.display());
        }
        Command::Synth(a) => {
            let p = SynthParams {
                n_correct: a.n_correct,
                n_incorrect: a.n_incorrect,
                delta: a.delta,
                mu: a.mu,
                sigma: a.sigma,
                seed: a.seed,
            };
            let (d, pen) = synth::synth_generate(&p, &a.out)?;
            println!("wrote {} and {}", d.display(), pen.display());
        }
        Command::Fertility(a) => {
            let terms = match &a.dump {
                Some(d) => crate::penalty::load_dump(d)
                    .map_err(AppError::from_penalty)?
                    .iter()
                    .map(|r| (r.word_tokens, r.words))
                    .collect(),
                None => pipeline::dataset_fertility_terms(&a.run.resolve()?)?,
            };
            let f = crate::stats::fertility(&terms).map_err(|e| AppError::Asset(format!("stats: {e}")))?;
            println!("{f}");
        }
    }
    Ok(())
}

fn report_omitted(m: &pipeline::Manifest) {
    for o in &m.functions_omitted {
        eprintln!("warning: {} omitted: {}", o.function, o.reason);
    }
}

//! Run configuration: a TOML file, then command-line overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AppError;
use crate::iforest::ForestParams;
use crate::logprob::{FirstTokenPolicy, ProviderConfig, ProviderMode};
use crate::penalty::{Aggregation, PenaltyConfig, PenaltyFunction};
use crate::stats::Variance;
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub unused_list: Option<PathBuf>,
    pub logprobs: Option<PathBuf>,
    pub score_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstToken {
    #[default]
    Floor,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltySection {
    pub functions: Vec<String>,
    /// `sum`, `avg`, `max`, `top` (uses `top_k`) or an explicit `topN`.
    pub aggregations: Vec<String>,
    pub top_k: usize,
    pub pos_weighting: bool,
    pub first_token: FirstToken,
    /// Natural-log floor for an absent first-token log-prob.
    pub first_token_floor: f64,
    /// Use raw rather than min-max normalized anomaly scores in AS.
    pub raw_anomaly: bool,
}

impl Default for PenaltySection {
    fn default() -> Self {
        Self {
            functions: PenaltyFunction::ALL.iter().map(|f| f.name().to_string()).collect(),
            aggregations: ["sum", "avg", "max", "top"].map(String::from).to_vec(),
            top_k: crate::penalty::DEFAULT_TOP_K,
            pos_weighting: true,
            first_token: FirstToken::Floor,
            first_token_floor: f64::NEG_INFINITY,
            raw_anomaly: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSection {
    pub subsample: usize,
    pub trees: usize,
    /// Defaults to the master seed.
    pub seed: Option<u64>,
}

impl Default for ForestSection {
    fn default() -> Self {
        let d = ForestParams::default();
        Self {
            subsample: d.subsample,
            trees: d.trees,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Log-probs of the bare instance text.
    #[default]
    Bare,
    /// Log-probs conditioned on an upstream task prompt.
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_name: String,
    pub model_name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub variance: Variance,
    pub logprob_conditioning: Conditioning,
    pub paths: Paths,
    pub tokenizer: TokenizerConfig,
    pub penalty: PenaltySection,
    pub forest: ForestSection,
    pub provider: ProviderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_name: "dataset".into(),
            model_name: "model".into(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            variance: Variance::Pooled,
            logprob_conditioning: Conditioning::Bare,
            paths: Paths::default(),
            tokenizer: TokenizerConfig::default(),
            penalty: PenaltySection::default(),
            forest: ForestSection::default(),
            provider: ProviderConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.dataset,
            &mut paths.vocab,
            &mut paths.merges,
            &mut paths.embeddings,
            &mut paths.unused_list,
            &mut paths.logprobs,
            &mut paths.score_cache,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn functions(&self) -> Result<Vec<PenaltyFunction>, AppError> {
        let mut out = Vec::new();
        for name in &self.penalty.functions {
            let f = name
                .parse::<PenaltyFunction>()
                .map_err(|e| AppError::Config(e.to_string()))?;
            if !out.contains(&f) {
                out.push(f);
            }
        }
        Ok(out)
    }

    pub fn aggregations(&self) -> Result<Vec<Aggregation>, AppError> {
        if self.penalty.top_k == 0 {
            return Err(AppError::Config("top_k must be at least 1".into()));
        }
        let mut out = Vec::new();
        for name in &self.penalty.aggregations {
            let agg = if name.eq_ignore_ascii_case("top") || name.eq_ignore_ascii_case("top_k") {
                Aggregation::TopK(self.penalty.top_k)
            } else {
                name.parse::<Aggregation>()
                    .map_err(|e| AppError::Config(e.to_string()))?
            };
            if !out.contains(&agg) {
                out.push(agg);
            }
        }
        Ok(out)
    }

    pub fn first_token_policy(&self) -> FirstTokenPolicy {
        match self.penalty.first_token {
            FirstToken::Floor => FirstTokenPolicy::Floor(self.penalty.first_token_floor),
            FirstToken::Skip => FirstTokenPolicy::Skip,
        }
    }

    pub fn penalty_config(&self) -> Result<PenaltyConfig, AppError> {
        Ok(PenaltyConfig {
            functions: self.functions()?,
            aggregations: self.aggregations()?,
            pos_weighting: self.penalty.pos_weighting,
            first_token: self.first_token_policy(),
        })
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            subsample: self.forest.subsample,
            trees: self.forest.trees,
            seed: self.forest.seed.unwrap_or(self.seed),
        }
    }

    pub fn uses_http(&self) -> bool {
        self.provider.mode == ProviderMode::Http
    }

    /// Checks everything that can be checked before loading assets.
    pub fn validate(&self) -> Result<(), AppError> {
        let need = |p: &Option<PathBuf>, what: &str| -> Result<(), AppError> {
            match p {
                None => Err(AppError::Config(format!("paths.{what} is required"))),
                Some(p) if !p.exists() => Err(AppError::Config(format!(
                    "paths.{what}: {} does not exist",
                    p.display()
                ))),
                Some(_) => Ok(()),
            }
        };
        need(&self.paths.dataset, "dataset")?;
        need(&self.paths.vocab, "vocab")?;
        need(&self.paths.merges, "merges")?;
        for (p, what) in [
            (&self.paths.embeddings, "embeddings"),
            (&self.paths.unused_list, "unused_list"),
            (&self.paths.logprobs, "logprobs"),
        ] {
            if p.is_some() {
                need(p, what)?;
            }
        }
        let functions = self.functions()?;
        self.aggregations()?;
        if functions.is_empty() {
            return Err(AppError::Config("penalty.functions is empty".into()));
        }
        if self.forest.subsample < 2 || self.forest.trees == 0 {
            return Err(AppError::Config(
                "forest.subsample must be >= 2 and forest.trees >= 1".into(),
            ));
        }
        if self.penalty.first_token_floor > 0.0 || self.penalty.first_token_floor.is_nan() {
            return Err(AppError::Config("penalty.first_token_floor must be <= 0".into()));
        }
        if functions.contains(&PenaltyFunction::CP) {
            match (self.paths.logprobs.is_some(), self.uses_http()) {
                (false, false) => {
                    return Err(AppError::Config(
                        "CP is enabled but no log-prob source is configured (paths.logprobs or provider.mode = \"http\")".into(),
                    ))
                }
                (true, true) => {
                    return Err(AppError::Config(
                        "CP needs exactly one log-prob source; both paths.logprobs and an http provider are set".into(),
                    ))
                }
                _ => {}
            }
        }
        if self.uses_http() {
            self.provider
                .validate()
                .map_err(|e| AppError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Canonical TOML rendering, hashed into the manifest.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

//! Run configuration: one TOML file plus dotted `key=value` overrides.
//!
//! Every table rejects unknown keys, so a misspelled override fails before
//! any work starts. Credentials are never configuration values; a remote
//! proposer names the environment variable holding its token.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ObjectiveSpec;
use crate::proposers::ObjectiveBrief;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    OverrideSyntax(String),
    #[error("override `{key}`: {message}")]
    Override { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionConfig {
    Tournament { size: usize },
    FitnessProportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    /// Samples `sample_n` distinct lines uniformly without replacement.
    File { path: PathBuf, sample_n: usize },
    /// Issues parentless prompts to the named proposer (`frozen` or
    /// `trainable`) until the population is full.
    Proposer {
        binding: String,
        #[serde(default)]
        max_prompts: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    Builtin {
        #[serde(default)]
        objectives: Option<Vec<String>>,
    },
    Subprocess {
        command: Vec<String>,
        objectives: Vec<ObjectiveSpec>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
    Http {
        url: String,
        objectives: Vec<ObjectiveSpec>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FingerprinterConfig {
    Ngram,
    External { command: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProposerConfig {
    /// Chat-completion endpoint of a frozen hosted model.
    Remote {
        endpoint: String,
        model: String,
        auth_env: Option<String>,
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default)]
        rate_limit: Option<f64>,
    },
    /// Chat-completion endpoint serving a trainable model; the served model
    /// name follows trainer updates.
    Local {
        endpoint: String,
        model_ref: String,
        #[serde(default = "default_temperature")]
        temperature: f64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default)]
        rate_limit: Option<f64>,
    },
    Mock {
        seed: u64,
        #[serde(default)]
        script: Option<PathBuf>,
        #[serde(default = "default_retries")]
        max_retries: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposersConfig {
    pub frozen: ProposerConfig,
    pub trainable: ProposerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainerConfig {
    Mock {
        #[serde(default = "default_top_n")]
        top_n: usize,
        #[serde(default = "default_learning_rate")]
        learning_rate: f64,
    },
    Subprocess {
        command: Vec<String>,
        #[serde(default = "default_train_timeout")]
        timeout_secs: f64,
    },
    Http {
        endpoint: String,
        #[serde(default = "default_train_timeout")]
        timeout_secs: f64,
    },
}

fn default_timeout() -> f64 {
    30.0
}
fn default_train_timeout() -> f64 {
    3600.0
}
fn default_temperature() -> f64 {
    1.0
}
fn default_retries() -> u32 {
    2
}
fn default_top_n() -> usize {
    5
}
fn default_learning_rate() -> f64 {
    1.0
}
fn default_population() -> usize {
    100
}
fn default_generations() -> u32 {
    50
}
fn default_alternation() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    0.3
}
fn default_pairs() -> usize {
    1
}
fn default_beta() -> f64 {
    0.1
}
fn default_concurrency() -> usize {
    4
}
fn default_selection() -> SelectionConfig {
    SelectionConfig::Tournament { size: 2 }
}
fn default_scorer() -> ScorerConfig {
    ScorerConfig::Builtin { objectives: None }
}
fn default_fingerprinter() -> FingerprinterConfig {
    FingerprinterConfig::Ngram
}
fn default_trainer() -> TrainerConfig {
    TrainerConfig::Mock { top_n: default_top_n(), learning_rate: default_learning_rate() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Population capacity M (even).
    #[serde(default = "default_population")]
    pub population_size: usize,
    /// Generation budget G.
    #[serde(default = "default_generations")]
    pub generations: u32,
    /// Fraction of prompt slots served by the frozen proposer.
    #[serde(default = "default_alternation")]
    pub alternation: f64,
    #[serde(default = "default_selection")]
    pub selection: SelectionConfig,
    /// Evaluations between trainer updates; defaults to 2M.
    #[serde(default)]
    pub update_every: Option<u64>,
    /// Recent prompts used for pair synthesis; defaults to M.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_pairs")]
    pub pairs_per_prompt: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Maximum concurrent proposal calls.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    pub init: InitConfig,
    #[serde(default = "default_scorer")]
    pub scorer: ScorerConfig,
    #[serde(default = "default_fingerprinter")]
    pub fingerprinter: FingerprinterConfig,
    /// Prompt briefs per objective; defaults depend on the scorer.
    #[serde(default)]
    pub briefs: Option<BTreeMap<String, ObjectiveBrief>>,
    pub proposers: ProposersConfig,
    #[serde(default = "default_trainer")]
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn update_every(&self) -> u64 {
        self.update_every.unwrap_or(2 * self.population_size as u64)
    }

    pub fn window(&self) -> usize {
        self.window.unwrap_or(self.population_size)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        let mut config = Self::from_toml_str(&text, overrides)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let InitConfig::File { path, .. } = &mut self.init {
            fix(path);
        }
        for p in [&mut self.proposers.frozen, &mut self.proposers.trainable] {
            if let ProposerConfig::Mock { script: Some(s), .. } = p {
                fix(s);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let m = self.population_size;
        if m < 2 || !m.is_multiple_of(2) {
            return bad(format!("population_size must be even and at least 2, got {m}"));
        }
        if self.generations < 1 {
            return bad("generations must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return bad(format!("alpha must lie in (0, 0.5], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.alternation) {
            return bad(format!("alternation must lie in [0, 1], got {}", self.alternation));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.update_every() == 0 || self.window() == 0 || self.pairs_per_prompt == 0 || self.concurrency == 0 {
            return bad("update_every, window, pairs_per_prompt and concurrency must be positive".into());
        }
        if let SelectionConfig::Tournament { size: 0 } = self.selection {
            return bad("tournament size must be positive".into());
        }
        match &self.init {
            InitConfig::File { sample_n, .. } if *sample_n == 0 => return bad("init.sample_n must be positive".into()),
            InitConfig::Proposer { binding, .. } if binding != "frozen" && binding != "trainable" => {
                return bad(format!("init.binding must be `frozen` or `trainable`, got `{binding}`"))
            }
            _ => {}
        }
        for p in [&self.proposers.frozen, &self.proposers.trainable] {
            match p {
                ProposerConfig::Remote { temperature, timeout_secs, .. } | ProposerConfig::Local { temperature, timeout_secs, .. }
                    if !(*temperature >= 0.0 && *timeout_secs > 0.0) =>
                {
                    return bad("proposer temperature must be >= 0 and timeout positive".into())
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` inside `root`. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(spec.into()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::OverrideSyntax(spec.into()));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_owned()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        let table = cursor.as_table_mut().ok_or_else(|| ConfigError::Override {
            key: key.into(),
            message: format!("`{part}` is not inside a table"),
        })?;
        cursor = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cursor.as_table_mut().ok_or_else(|| ConfigError::Override {
        key: key.into(),
        message: "parent is not a table".into(),
    })?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

//! On-disk application settings.
//!
//! The file is JSON and every section is optional. Credentials are never read
//! from it: the API key comes from the environment only, and unknown keys
//! (including any attempt to add one) are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use polevent_core::embed::EmbedderConfig;
use polevent_core::engine::{CorpusConfig, EngineConfig};
use polevent_core::eval::DEFAULT_TAU;
use polevent_core::llm::LlmConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("config {path}: {field} refers to missing file {target}")]
    MissingFile {
        path: PathBuf,
        field: &'static str,
        target: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub tau: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU }
    }
}

/// Optional replacements for the built-in prompt templates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptFiles {
    pub system: Option<PathBuf>,
    pub wrapper: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    /// Directory holding the index, chunk sidecar and metadata.
    pub index: PathBuf,
    pub gold: Option<PathBuf>,
    pub mock: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: None,
            index: PathBuf::from("index"),
            gold: None,
            mock: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub corpus: CorpusConfig,
    pub embedder: EmbedderConfig,
    pub llm: LlmConfig,
    pub engine: EngineConfig,
    pub eval: EvalSettings,
    pub prompts: PromptFiles,
    pub paths: Paths,
}

fn rebase(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl AppConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory, and referenced input files must exist.
    pub fn load(path: &Path) -> Result<AppConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut config: AppConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
                path: path.to_owned(),
                message: e.to_string(),
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            config.paths.corpus.as_mut(),
            config.paths.gold.as_mut(),
            config.paths.mock.as_mut(),
            config.prompts.system.as_mut(),
            config.prompts.wrapper.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            rebase(base, p);
        }
        rebase(base, &mut config.paths.index);
        config.check(path)?;
        Ok(config)
    }

    fn check(&self, path: &Path) -> Result<(), ConfigError> {
        let invalid = |message: String| ConfigError::Invalid {
            path: path.to_owned(),
            message,
        };
        let files: [(&'static str, Option<&PathBuf>); 5] = [
            ("paths.corpus", self.paths.corpus.as_ref()),
            ("paths.gold", self.paths.gold.as_ref()),
            ("paths.mock", self.paths.mock.as_ref()),
            ("prompts.system", self.prompts.system.as_ref()),
            ("prompts.wrapper", self.prompts.wrapper.as_ref()),
        ];
        for (field, target) in files {
            if let Some(target) = target.filter(|t| !t.exists()) {
                return Err(ConfigError::MissingFile {
                    path: path.to_owned(),
                    field,
                    target: target.clone(),
                });
            }
        }
        self.embedder.validate().map_err(|e| invalid(e.to_string()))?;
        self.llm.validate().map_err(|e| invalid(e.to_string()))?;
        self.engine.validate().map_err(|e| invalid(e.to_string()))?;
        self.corpus.filter.validate().map_err(|e| invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.eval.tau) {
            return Err(invalid(format!("eval.tau must lie in [0, 1], got {}", self.eval.tau)));
        }
        Ok(())
    }
}

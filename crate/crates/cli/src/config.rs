//! Run configuration: one JSON file, `--set` overrides applied to the raw
//! JSON before typed parsing so every error carries its field path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use clinforge_core::dpo::DpoConfig;
use clinforge_core::eval::EvalOptions;
use clinforge_core::model::ModelConfig;
use clinforge_core::prefs::PrefsConfig;
use clinforge_core::sft::SftConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: invalid JSON: {source}")]
    Syntax { path: PathBuf, source: serde_json::Error },
    #[error("config {path}: at `{field}`: {message}")]
    Field { path: PathBuf, field: String, message: String },
    #[error("override {0:?}: expected key=value")]
    Override(String),
    #[error("override {key:?}: {reason}")]
    OverridePath { key: String, reason: String },
    #[error("config section `{section}`: {message}")]
    Invalid { section: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Records drawn for the SFT mixture.
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    /// JSONL, one `{"prompt": [messages]}` per line.
    pub prompts: PathBuf,
    pub eval_items: PathBuf,
    #[serde(default)]
    pub external_pairs: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default)]
    pub prefs: PrefsConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    pub paths: Paths,
}

impl RunConfig {
    /// Reads `path`, applies overrides, parses and validates. Relative paths
    /// resolve against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut raw: Value =
            serde_json::from_str(&text).map_err(|source| ConfigError::Syntax { path: path.into(), source })?;
        for o in overrides {
            apply_override(&mut raw, o)?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(raw).map_err(|e| ConfigError::Field {
            path: path.into(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in [&mut p.manifest, &mut p.prompts, &mut p.eval_items, &mut p.out] {
            resolve(base, slot);
        }
        if let Some(x) = &mut p.external_pairs {
            resolve(base, x);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section, message: String| ConfigError::Invalid { section, message };
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.sft.validate().map_err(|e| invalid("sft", e.to_string()))?;
        if self.sft.chunk_len > self.model.max_ctx + 1 {
            return Err(invalid("sft", format!("chunk_len {} exceeds model max_ctx + 1", self.sft.chunk_len)));
        }
        self.dpo.validate().map_err(|e| invalid("dpo", e.to_string()))?;
        if self.dpo.max_len > self.model.max_ctx {
            return Err(invalid(
                "dpo",
                format!("max_len {} exceeds model max_ctx {}", self.dpo.max_len, self.model.max_ctx),
            ));
        }
        self.prefs.validate().map_err(|e| invalid("prefs", e.to_string()))?;
        if self.corpus.total == 0 {
            return Err(invalid("corpus", "total must be positive".into()));
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// `a.b.c=value`. The value is parsed as JSON when possible, otherwise taken
/// as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::OverridePath {
            key: key.to_string(),
            reason: format!("`{}` is not an object", parts[..i].join(".")),
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

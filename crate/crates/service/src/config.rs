//! Service configuration: one TOML file plus `BOPE_*` environment overrides.

use bope_core::config::Budgets;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub storage_dir: PathBuf,
    /// Budgets applied to sessions whose config does not set its own.
    pub budgets: Budgets,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1".into(), port: 8080, storage_dir: PathBuf::from("bope-sessions"), budgets: Budgets::desk() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {var}: {message}")]
    Env { var: &'static str, message: String },
}

impl ServiceConfig {
    /// Loads `path` if given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
                toml::from_str(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    /// Overrides from `BOPE_BIND`, `BOPE_PORT`, `BOPE_STORAGE_DIR` and `BOPE_BUDGETS` (JSON).
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get("BOPE_BIND") {
            self.bind = v;
        }
        if let Some(v) = get("BOPE_PORT") {
            self.port = v.parse().map_err(|e| ConfigError::Env { var: "BOPE_PORT", message: format!("{e}") })?;
        }
        if let Some(v) = get("BOPE_STORAGE_DIR") {
            self.storage_dir = PathBuf::from(v);
        }
        if let Some(v) = get("BOPE_BUDGETS") {
            self.budgets =
                serde_json::from_str(&v).map_err(|e| ConfigError::Env { var: "BOPE_BUDGETS", message: format!("{e}") })?;
        }
        Ok(())
    }
}

//! Service configuration: TOML or JSON file, then `VFP_PORT`, `VFP_MODEL`
//! and `VFP_CALIB` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vfp_core::pipeline::PipelineConfig;

pub const MIN_UPLOAD_BYTES: usize = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub model_path: PathBuf,
    pub calibration_path: PathBuf,
    pub pipeline: PipelineConfig,
    pub max_upload_bytes: usize,
    pub request_timeout_s: u64,
    /// Origins allowed by CORS (the local UI).
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            model_path: PathBuf::from("model.vfpm"),
            calibration_path: PathBuf::from("calibration.json"),
            pipeline: PipelineConfig::default(),
            max_upload_bytes: 20 << 20,
            request_timeout_s: 30,
            cors_origins: vec!["http://localhost:5173".into(), "http://127.0.0.1:5173".into()],
        }
    }
}

/// Reads environment variables through a lookup so tests need not touch the process env.
pub fn apply_env(cfg: &mut ServiceConfig, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
    if let Some(p) = lookup("VFP_PORT") {
        cfg.port = p.trim().parse().map_err(|_| ConfigError::Invalid(format!("VFP_PORT '{p}' is not a port number")))?;
    }
    if let Some(m) = lookup("VFP_MODEL") {
        cfg.model_path = m.into();
    }
    if let Some(c) = lookup("VFP_CALIB") {
        cfg.calibration_path = c.into();
    }
    Ok(())
}

impl ServiceConfig {
    /// `.json` files parse as JSON, anything else as TOML.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::NotFound(path.to_path_buf()),
            _ => ConfigError::Io(e),
        })?;
        let parse_err = |message: String| ConfigError::Parse { path: path.to_path_buf(), message };
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))
        }
    }

    /// File (or defaults), then process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        apply_env(&mut cfg, |k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_upload_bytes < MIN_UPLOAD_BYTES {
            return Err(ConfigError::Invalid(format!("max_upload_bytes must be at least {MIN_UPLOAD_BYTES}")));
        }
        if self.request_timeout_s == 0 {
            return Err(ConfigError::Invalid("request_timeout_s must be positive".into()));
        }
        for (what, p) in [("model", &self.model_path), ("calibration", &self.calibration_path)] {
            if !p.is_file() {
                return Err(ConfigError::Invalid(format!("{what} file not found: {}", p.display())));
            }
        }
        Ok(())
    }
}

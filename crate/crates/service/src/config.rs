//! Service settings and analysis parameters, read from one TOML file.
//!
//! ```toml
//! [service]
//! workers = 4
//!
//! [events]
//! block_min_s = 0.4
//! ```
//!
//! Every section other than `[service]` is passed to the analysis pipeline.

use std::path::Path;

use serde::Deserialize;
use stutter_core::config::ConfigError;
use stutter_core::PipelineConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("reading {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Pipeline(#[from] ConfigError),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Analysis jobs allowed to run at the same time.
    pub workers: usize,
    /// Largest accepted upload body, in MiB.
    pub max_upload_mib: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 2,
            max_upload_mib: 512,
        }
    }
}

impl ServiceConfig {
    pub fn max_upload_bytes(&self) -> usize {
        self.max_upload_mib.saturating_mul(1 << 20)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub service: ServiceConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Deserialize)]
struct ServiceSection {
    #[serde(default)]
    service: ServiceConfig,
}

impl Settings {
    pub fn from_toml_str(text: &str) -> Result<Self, SettingsError> {
        let ServiceSection { service } = toml::from_str(text)?;
        if service.workers == 0 {
            return Err(SettingsError::Invalid(
                "service.workers must be at least 1".into(),
            ));
        }
        if service.max_upload_mib == 0 {
            return Err(SettingsError::Invalid(
                "service.max_upload_mib must be at least 1".into(),
            ));
        }
        Ok(Self {
            service,
            pipeline: PipelineConfig::from_toml_str(text)?,
        })
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, SettingsError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| SettingsError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}

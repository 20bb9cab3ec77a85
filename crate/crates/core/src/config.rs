//! Tunable analysis parameters, read from a TOML file.
//!
//! ```toml
//! [vad]
//! margin = 2.3
//!
//! [events]
//! prolongation_ratio = 2.5
//! ```
//!
//! Missing keys keep their defaults. A snapshot of the effective values is
//! embedded in every analysis bundle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventConfig;
use crate::pitch::PitchConfig;
use crate::speaker::SvmConfig;
use crate::vad::VadConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerConfig {
    pub svm: SvmConfig,
    /// Enrollment audio is cut into chunks of this length for training.
    pub chunk_s: f64,
    pub min_therapist_speech_s: f64,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self {
            svm: SvmConfig::default(),
            chunk_s: 1.0,
            min_therapist_speech_s: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisplayConfig {
    /// Upper bound on category posterior rows per second in bundles.
    pub max_posterior_rows_per_s: f64,
}

impl Default for DisplayConfig {
    fn default() -> Self {
        Self {
            max_posterior_rows_per_s: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub vad: VadConfig,
    pub pitch: PitchConfig,
    pub speaker: SpeakerConfig,
    pub events: EventConfig,
    pub display: DisplayConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(0.0..=100.0).contains(&self.vad.floor_percentile) {
            return fail("vad.floor_percentile must be within [0, 100]");
        }
        if self.pitch.min_hz <= 0.0 || self.pitch.min_hz >= self.pitch.max_hz {
            return fail("pitch.min_hz must be positive and below pitch.max_hz");
        }
        if self.speaker.chunk_s <= 0.0 {
            return fail("speaker.chunk_s must be positive");
        }
        if self.speaker.svm.c <= 0.0 {
            return fail("speaker.svm.c must be positive");
        }
        if self.events.block_min_s > self.events.block_max_s {
            return fail("events.block_min_s exceeds events.block_max_s");
        }
        if self.display.max_posterior_rows_per_s <= 0.0 {
            return fail("display.max_posterior_rows_per_s must be positive");
        }
        Ok(())
    }
}

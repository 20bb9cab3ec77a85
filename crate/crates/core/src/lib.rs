//! Analysis core for recorded stuttering-therapy sessions.
//!
//! A recording flows through [`audio`] (decode, resample, frame), [`features`]
//! (spectrum, mel, MFCC), [`vad`] (speech segments), [`speaker`] (therapist
//! removal), [`pitch`], [`phones`] (posteriors, categories, decoding) and
//! [`events`] (prolongation, repetition and block markers). [`pipeline`] runs
//! the stages in order and [`store`] persists sessions on the local disk.

pub mod audio;
pub mod bundle;
pub mod config;
pub mod events;
pub mod features;
pub mod phones;
pub mod pipeline;
pub mod pitch;
pub mod speaker;
pub mod store;
pub mod time;
pub mod vad;

pub use audio::AudioClip;
pub use bundle::AnalysisBundle;
pub use config::PipelineConfig;
pub use features::FeatureMatrix;
pub use pipeline::{Enrollment, EnrollmentSet, Pipeline, PipelineError, PipelineOutput};

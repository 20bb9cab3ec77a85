//! The full analysis run over one recording.
//!
//! decode → resample → frame → features → VAD → speaker filter → pitch →
//! posteriors → categories → phone decoding → events → bundle.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError, CANONICAL_RATE};
use crate::bundle::{
    AnalysisBundle, CategoryTrack, SegmentRecord, SpeakerFilterStatus, PIPELINE_VERSION,
};
use crate::config::PipelineConfig;
use crate::events::{client_regions, detect_all};
use crate::features::{FeatureExtractor, FeatureMatrix};
use crate::phones::{
    self, category_posteriors, decode_phones, AcousticModel, PhoneError, PhoneSet,
};
use crate::pitch::track_pitch;
use crate::speaker::{
    self, all_client, chunk_embeddings, filter_client_segments, train_speaker_model,
    SpeakerEmbedding, SpeakerLabel, SpeakerModel, MIN_EMBED_FRAMES, MIN_ENROLLMENT_PER_SIDE,
};
use crate::vad::{detect_speech, SpeechSegment};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Phones(#[from] PhoneError),
    #[error("enrollment has {speech_s:.2} s of speech, need {required_s:.2} s")]
    TooLittleSpeech { speech_s: f64, required_s: f64 },
}

/// Embeddings of one speaker's enrollment recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentSet {
    pub speech_s: f64,
    pub embeddings: Vec<SpeakerEmbedding>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Enrollment {
    pub therapist: Option<EnrollmentSet>,
    pub client: Option<EnrollmentSet>,
}

pub struct PipelineOutput {
    pub clip: AudioClip,
    pub features: FeatureMatrix,
    pub bundle: AnalysisBundle,
    pub speaker_model: Option<SpeakerModel>,
}

pub struct Pipeline {
    config: PipelineConfig,
    model: Arc<dyn AcousticModel>,
    phone_set: PhoneSet,
    extractor: FeatureExtractor,
}

fn frame_index(t_s: f64, hop_s: f64) -> usize {
    (t_s / hop_s).round().max(0.0) as usize
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        model: Arc<dyn AcousticModel>,
        phone_set: PhoneSet,
    ) -> Result<Self, PhoneError> {
        if model.n_phones() != phone_set.len() {
            return Err(PhoneError::PhoneCountMismatch {
                model: model.n_phones(),
                set: phone_set.len(),
            });
        }
        if model.input_dim() != crate::features::N_MFCC {
            return Err(PhoneError::DimensionMismatch {
                expected: model.input_dim(),
                found: crate::features::N_MFCC,
            });
        }
        Ok(Self {
            config,
            model,
            phone_set,
            extractor: FeatureExtractor::default(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn phone_set(&self) -> &PhoneSet {
        &self.phone_set
    }

    fn canonical(&self, clip: &AudioClip) -> Result<AudioClip, AudioError> {
        if clip.sample_rate() == CANONICAL_RATE {
            Ok(clip.clone())
        } else {
            audio::resample(clip, CANONICAL_RATE)
        }
    }

    fn chunk_frames(&self, hop_s: f64) -> usize {
        frame_index(self.config.speaker.chunk_s, hop_s).max(MIN_EMBED_FRAMES)
    }

    /// Speech chunks of an enrollment recording. A therapist enrollment must
    /// hold at least `min_therapist_speech_s` of detected speech.
    pub fn enroll(
        &self,
        clip: &AudioClip,
        label: SpeakerLabel,
    ) -> Result<EnrollmentSet, PipelineError> {
        let clip = self.canonical(clip)?;
        let features = self.extractor.extract(&clip);
        let segments = detect_speech(&features.log_energy, features.hop_s, &self.config.vad);
        let speech_s = segments
            .iter()
            .map(SpeechSegment::duration_s)
            .fold(0.0, |a, d| a + d);
        if label == SpeakerLabel::Therapist && speech_s < self.config.speaker.min_therapist_speech_s
        {
            return Err(PipelineError::TooLittleSpeech {
                speech_s,
                required_s: self.config.speaker.min_therapist_speech_s,
            });
        }
        let chunk = self.chunk_frames(features.hop_s);
        let embeddings = segments
            .iter()
            .flat_map(|seg| chunk_embeddings(&features.mfcc[seg.frames()], chunk))
            .collect();
        Ok(EnrollmentSet {
            speech_s,
            embeddings,
        })
    }

    /// Client enrollment taken from the start of the recording itself: chunks
    /// of the earliest speech segments until enough are collected.
    fn client_from_recording(
        &self,
        features: &FeatureMatrix,
        segments: &[SpeechSegment],
    ) -> Vec<SpeakerEmbedding> {
        let chunk = self.chunk_frames(features.hop_s);
        let mut out = Vec::new();
        for seg in segments {
            out.extend(chunk_embeddings(&features.mfcc[seg.frames()], chunk));
            if out.len() >= MIN_ENROLLMENT_PER_SIDE {
                break;
            }
        }
        out
    }

    fn label_segments(
        &self,
        features: &FeatureMatrix,
        segments: &[SpeechSegment],
        enrollment: &Enrollment,
    ) -> (
        Vec<speaker::SpeakerTurn>,
        SpeakerFilterStatus,
        Option<SpeakerModel>,
    ) {
        let Some(therapist) = enrollment.therapist.as_ref() else {
            return (all_client(segments), SpeakerFilterStatus::NotEnrolled, None);
        };
        let client = match &enrollment.client {
            Some(set) => set.embeddings.clone(),
            None => self.client_from_recording(features, segments),
        };
        let model =
            match train_speaker_model(&therapist.embeddings, &client, &self.config.speaker.svm) {
                Ok(model) => model,
                Err(err) => {
                    tracing::warn!(%err, "speaker model unavailable; analyzing all speech");
                    return (
                        all_client(segments),
                        SpeakerFilterStatus::Unavailable {
                            reason: err.to_string(),
                        },
                        None,
                    );
                }
            };
        let embeddings: Vec<Option<SpeakerEmbedding>> = segments
            .iter()
            .map(|seg| speaker::embed(&features.mfcc[seg.frames()]).ok())
            .collect();
        let (client_turns, therapist_turns) = filter_client_segments(segments, &embeddings, &model);
        let mut turns = client_turns;
        turns.extend(therapist_turns);
        turns.sort_by_key(|t| t.segment_id);
        let status = SpeakerFilterStatus::Applied {
            train_margin: model.train_margin(),
        };
        (turns, status, Some(model))
    }

    /// Runs the whole analysis. `progress` receives non-decreasing values in
    /// `[0, 1)`; completion is signalled by the return.
    pub fn run(
        &self,
        clip: &AudioClip,
        enrollment: &Enrollment,
        progress: &mut dyn FnMut(f64),
    ) -> Result<PipelineOutput, PipelineError> {
        progress(0.0);
        let clip = self.canonical(clip)?;
        progress(0.05);
        let features = self.extractor.extract(&clip);
        let hop_s = features.hop_s;
        progress(0.25);
        let segments = detect_speech(&features.log_energy, hop_s, &self.config.vad);
        progress(0.3);
        let (turns, speaker_filter, speaker_model) =
            self.label_segments(&features, &segments, enrollment);
        progress(0.4);

        let client_ids: Vec<usize> = turns
            .iter()
            .filter(|t| t.label == SpeakerLabel::Client)
            .map(|t| t.segment_id)
            .collect();
        let client_segments: Vec<SpeechSegment> = segments
            .iter()
            .filter(|s| client_ids.contains(&s.id))
            .cloned()
            .collect();
        let pitch_track = track_pitch(
            &clip,
            self.extractor.grid(),
            &client_segments,
            &self.config.pitch,
        );
        progress(0.6);

        let posteriors = phones::forward(self.model.as_ref(), &features)?;
        let categories = category_posteriors(&posteriors, &self.phone_set);
        progress(0.75);

        let mut phone_segments = Vec::new();
        for (start_s, end_s) in client_regions(&turns) {
            let start = frame_index(start_s, hop_s).min(posteriors.len());
            let end = frame_index(end_s, hop_s).min(posteriors.len());
            phone_segments.extend(decode_phones(
                &posteriors[start..end],
                &self.phone_set,
                hop_s,
            ));
        }
        progress(0.85);
        let events = detect_all(
            &phone_segments,
            &turns,
            &self.phone_set,
            &self.config.events,
        );
        progress(0.95);

        let bundle = AnalysisBundle {
            pipeline_version: PIPELINE_VERSION.to_string(),
            duration_s: clip.duration_s(),
            segments: segments.iter().map(SegmentRecord::from).collect(),
            speaker_filter,
            turns,
            pitch_track,
            category_posteriors: CategoryTrack::downsample(
                &categories,
                hop_s,
                self.config.display.max_posterior_rows_per_s,
            ),
            phone_segments,
            events,
            config_snapshot: self.config.clone(),
        }
        .round_for_export();
        Ok(PipelineOutput {
            clip,
            features,
            bundle,
            speaker_model,
        })
    }
}

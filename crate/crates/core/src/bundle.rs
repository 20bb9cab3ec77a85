//! The analysis result exported as `analysis.json` and served to the UI.

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::events::StutterEvent;
use crate::phones::{Category, CategoryFrame, PhoneSegment};
use crate::pitch::PitchTrack;
use crate::speaker::SpeakerTurn;
use crate::time::round_ms;
use crate::vad::SpeechSegment;

pub const PIPELINE_VERSION: &str = concat!("stutter-core/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl From<&SpeechSegment> for SegmentRecord {
    fn from(seg: &SpeechSegment) -> Self {
        Self {
            id: seg.id,
            start_s: round_ms(seg.start_s),
            end_s: round_ms(seg.end_s),
        }
    }
}

/// How therapist speech was separated, if at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SpeakerFilterStatus {
    /// A speaker model was trained and applied.
    Applied { train_margin: f64 },
    /// No therapist enrollment; every segment was treated as client speech.
    NotEnrolled,
    /// Enrollment existed but no usable model could be trained.
    Unavailable { reason: String },
}

/// Category posteriors at display rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryTrack {
    pub rate_hz: f64,
    pub categories: Vec<String>,
    pub t_s: Vec<f64>,
    pub p: Vec<[f64; 7]>,
}

fn round_to(x: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    (x * scale).round() / scale
}

impl CategoryTrack {
    /// Averages groups of consecutive frames so the track has at most
    /// `max_rows_per_s` rows per second.
    pub fn downsample(frames: &[CategoryFrame], hop_s: f64, max_rows_per_s: f64) -> Self {
        let factor = ((1.0 / hop_s) / max_rows_per_s).ceil().max(1.0) as usize;
        let mut t_s = Vec::new();
        let mut p = Vec::new();
        for group in frames.chunks(factor) {
            let mut acc = [0.0; 7];
            for f in group {
                for (a, v) in acc.iter_mut().zip(&f.p) {
                    *a += v;
                }
            }
            t_s.push(round_ms(group[0].t_s));
            p.push(acc.map(|v| round_to(v / group.len() as f64, 4)));
        }
        Self {
            rate_hz: 1.0 / (hop_s * factor as f64),
            categories: Category::ALL.iter().map(|c| c.name().to_string()).collect(),
            t_s,
            p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub pipeline_version: String,
    pub duration_s: f64,
    pub segments: Vec<SegmentRecord>,
    pub speaker_filter: SpeakerFilterStatus,
    pub turns: Vec<SpeakerTurn>,
    pub pitch_track: PitchTrack,
    pub category_posteriors: CategoryTrack,
    pub phone_segments: Vec<PhoneSegment>,
    pub events: Vec<StutterEvent>,
    pub config_snapshot: PipelineConfig,
}

impl AnalysisBundle {
    /// Canonical JSON encoding; identical bundles give identical bytes.
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// Rounds display-only values so exported JSON stays compact.
    pub(crate) fn round_for_export(mut self) -> Self {
        for f in self.pitch_track.f0_hz.iter_mut().flatten() {
            *f = round_to(*f, 2);
        }
        for v in &mut self.pitch_track.voicing {
            *v = round_to(*v, 4);
        }
        for p in &mut self.phone_segments {
            p.mean_posterior = round_to(p.mean_posterior, 4);
        }
        for t in &mut self.turns {
            t.score = round_to(t.score, 4);
        }
        for e in &mut self.events {
            e.score = round_to(e.score, 4);
            e.start_s = round_ms(e.start_s);
            e.end_s = round_ms(e.end_s);
            for v in [
                &mut e.evidence.duration_s,
                &mut e.evidence.duration_ratio,
                &mut e.evidence.median_s,
            ]
            .into_iter()
            .flatten()
            {
                *v = round_to(*v, 4);
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_caps_rate() {
        let frames: Vec<CategoryFrame> = (0..10)
            .map(|k| CategoryFrame {
                t_s: k as f64 * 0.005,
                p: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            })
            .collect();
        let track = CategoryTrack::downsample(&frames, 0.005, 100.0);
        assert_eq!(track.p.len(), 5);
        assert!((track.rate_hz - 100.0).abs() < 1e-9);
        let same = CategoryTrack::downsample(&frames, 0.01, 100.0);
        assert_eq!(same.p.len(), 10);
    }
}

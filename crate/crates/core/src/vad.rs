//! Energy-based voice activity detection and segmentation.
//!
//! The threshold is relative to a noise-floor estimate (a low percentile of
//! the frame log-energies), so recordings made at different gains segment the
//! same way.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::time::round_ms;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VadError {
    #[error("segment {id} [{start_s}, {end_s}] lies outside the clip ({duration_s} s)")]
    SegmentOutOfRange {
        id: usize,
        start_s: f64,
        end_s: f64,
        duration_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    /// Percentile of frame log-energy used as the noise floor.
    pub floor_percentile: f64,
    /// Margin above the floor, in nats of energy (2.3 is about 10 dB).
    pub margin: f64,
    /// Non-speech gaps shorter than this are closed.
    pub gap_close_s: f64,
    /// Speech runs shorter than this are dropped.
    pub min_segment_s: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            floor_percentile: 10.0,
            margin: 2.3,
            gap_close_s: 0.2,
            min_segment_s: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechSegment {
    pub id: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub mean_log_energy: f64,
    /// First frame of the segment.
    pub start_frame: usize,
    /// One past the last frame of the segment.
    pub end_frame: usize,
}

impl SpeechSegment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start_frame..self.end_frame
    }
}

/// Linear-interpolated percentile (`p` in `[0, 100]`) of `values`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Marks frames above `P(floor_percentile) + margin`, closes short gaps,
/// drops short runs, and returns the surviving runs as segments.
///
/// Segment `[start_s, end_s)` spans `start_frame * hop` to `end_frame * hop`.
pub fn detect_speech(log_energy: &[f64], hop_s: f64, config: &VadConfig) -> Vec<SpeechSegment> {
    if log_energy.is_empty() {
        return Vec::new();
    }
    let threshold = percentile(log_energy, config.floor_percentile) + config.margin;
    let gap_frames = (config.gap_close_s / hop_s).round() as usize;
    let min_frames = (config.min_segment_s / hop_s).round() as usize;

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (k, &e) in log_energy.iter().enumerate() {
        match (e > threshold, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                runs.push((s, k));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, log_energy.len()));
    }

    let mut closed: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for run in runs {
        match closed.last_mut() {
            Some(last) if run.0 - last.1 < gap_frames => last.1 = run.1,
            _ => closed.push(run),
        }
    }

    closed
        .into_iter()
        .filter(|(s, e)| e - s >= min_frames.max(1))
        .enumerate()
        .map(|(id, (s, e))| SpeechSegment {
            id,
            start_s: round_ms(s as f64 * hop_s),
            end_s: round_ms(e as f64 * hop_s),
            mean_log_energy: log_energy[s..e].iter().sum::<f64>() / (e - s) as f64,
            start_frame: s,
            end_frame: e,
        })
        .collect()
}

/// Sample-accurate slices of `clip` for each segment.
pub fn segment_clip(
    clip: &AudioClip,
    segments: &[SpeechSegment],
) -> Result<Vec<AudioClip>, VadError> {
    segments
        .iter()
        .map(|seg| {
            let start = clip.index_at(seg.start_s);
            let end = clip.index_at(seg.end_s);
            if seg.start_s < 0.0 || start > end || end > clip.len() {
                return Err(VadError::SegmentOutOfRange {
                    id: seg.id,
                    start_s: seg.start_s,
                    end_s: seg.end_s,
                    duration_s: clip.duration_s(),
                });
            }
            Ok(clip.slice(start, end))
        })
        .collect()
}

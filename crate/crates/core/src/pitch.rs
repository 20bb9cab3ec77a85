//! Pitch tracking by normalized autocorrelation.

use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, FrameGrid};
use crate::vad::SpeechSegment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PitchConfig {
    pub min_hz: f64,
    pub max_hz: f64,
    pub voicing_threshold: f64,
    /// Analysis window length in seconds.
    pub window_s: f64,
    /// A lag peak is accepted as the period once it reaches this fraction of
    /// the strongest peak; earlier (shorter) lags win.
    pub peak_fraction: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            min_hz: 50.0,
            max_hz: 450.0,
            voicing_threshold: 0.6,
            window_s: 0.040,
            peak_fraction: 0.9,
        }
    }
}

/// Per-frame fundamental estimates aligned with the feature frame grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchTrack {
    #[serde(rename = "t_s")]
    pub frame_times_s: Vec<f64>,
    pub f0_hz: Vec<Option<f64>>,
    pub voicing: Vec<f64>,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }
}

/// Normalized autocorrelation at `lag`: the correlation of the overlapping
/// parts divided by the geometric mean of their energies.
fn nac(x: &[f64], lag: usize) -> f64 {
    if lag >= x.len() {
        return 0.0;
    }
    let (a, b) = (&x[..x.len() - lag], &x[lag..]);
    let mut cross = 0.0;
    let mut ea = 0.0;
    let mut eb = 0.0;
    for (p, q) in a.iter().zip(b) {
        cross += p * q;
        ea += p * p;
        eb += q * q;
    }
    let denom = (ea * eb).sqrt();
    if denom > 0.0 {
        cross / denom
    } else {
        0.0
    }
}

/// Estimates the fundamental of one analysis window.
///
/// Returns `(f0, confidence)`; `f0` is `None` when the confidence (the chosen
/// autocorrelation peak) is below the voicing threshold. An all-zero window
/// has confidence 0.
pub fn estimate_frame_f0(frame: &[f64], rate: u32, config: &PitchConfig) -> (Option<f64>, f64) {
    let n = frame.len();
    if n == 0 {
        return (None, 0.0);
    }
    let mean = frame.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = frame.iter().map(|s| s - mean).collect();
    if x.iter().all(|&s| s == 0.0) {
        return (None, 0.0);
    }
    let rate_f = rate as f64;
    let min_lag = ((rate_f / config.max_hz).ceil() as usize).max(2);
    let max_lag = ((rate_f / config.min_hz).floor() as usize).min(n - 2);
    if min_lag + 1 >= max_lag {
        return (None, 0.0);
    }
    // one extra lag on each side for peak picking and interpolation
    let lags = min_lag - 1..=max_lag + 1;
    let r: Vec<f64> = lags.clone().map(|lag| nac(&x, lag)).collect();
    let at = |lag: usize| r[lag - (min_lag - 1)];

    let peaks: Vec<usize> = (min_lag..=max_lag)
        .filter(|&lag| at(lag) > at(lag - 1) && at(lag) >= at(lag + 1) && at(lag) > 0.0)
        .collect();
    let Some(best) = peaks.iter().map(|&l| at(l)).max_by(f64::total_cmp) else {
        return (None, 0.0);
    };
    let lag = peaks
        .iter()
        .copied()
        .find(|&l| at(l) >= config.peak_fraction * best)
        .expect("the maximum itself qualifies");
    let confidence = at(lag).clamp(0.0, 1.0);

    let (y0, y1, y2) = (at(lag - 1), at(lag), at(lag + 1));
    let curvature = y0 - 2.0 * y1 + y2;
    let shift = if curvature < 0.0 {
        (0.5 * (y0 - y2) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    if confidence < config.voicing_threshold {
        return (None, confidence);
    }
    // interpolation may step half a lag past the search range
    let f0 = (rate_f / (lag as f64 + shift)).clamp(config.min_hz, config.max_hz);
    (Some(f0), confidence)
}

/// Analysis window for frame `k`, centered on the feature frame's center and
/// zero-padded past the clip edges.
fn pitch_window(samples: &[f64], center: usize, len: usize) -> Vec<f64> {
    let start = center as i64 - (len / 2) as i64;
    (0..len as i64)
        .map(|i| {
            let idx = start + i;
            if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Median over the present neighbours `{i-1, i, i+1}`; frames with fewer than
/// three present neighbours keep their own estimate.
fn median_smooth(f0: &[Option<f64>]) -> Vec<Option<f64>> {
    (0..f0.len())
        .map(|i| {
            let current = f0[i]?;
            if i == 0 || i + 1 == f0.len() {
                return Some(current);
            }
            match (f0[i - 1], f0[i + 1]) {
                (Some(a), Some(b)) => {
                    let mut v = [a, current, b];
                    v.sort_by(f64::total_cmp);
                    Some(v[1])
                }
                _ => Some(current),
            }
        })
        .collect()
}

/// Pitch track over the frame grid of `clip`. Frames outside `segments` are
/// unvoiced; inside, present estimates are 3-point median smoothed within
/// each segment.
pub fn track_pitch(
    clip: &AudioClip,
    grid: &FrameGrid,
    segments: &[SpeechSegment],
    config: &PitchConfig,
) -> PitchTrack {
    let n_frames = grid.frame_count(clip.len());
    let rate = clip.sample_rate();
    let window_len = (config.window_s * rate as f64).round() as usize;
    let mut f0 = vec![None; n_frames];
    let mut voicing = vec![0.0; n_frames];
    for seg in segments {
        let frames = seg.start_frame.min(n_frames)..seg.end_frame.min(n_frames);
        let mut raw = Vec::with_capacity(frames.len());
        for k in frames.clone() {
            let center = k * grid.hop() + grid.frame_length() / 2;
            let window = pitch_window(clip.samples(), center, window_len);
            let (est, conf) = estimate_frame_f0(&window, rate, config);
            voicing[k] = conf;
            raw.push(est);
        }
        for (k, v) in frames.zip(median_smooth(&raw)) {
            f0[k] = v;
        }
    }
    PitchTrack {
        frame_times_s: (0..n_frames)
            .map(|k| crate::time::round_ms(k as f64 * grid.hop_s(rate)))
            .collect(),
        f0_hz: f0,
        voicing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(f0: f64, n: usize, rate: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * f0 * i as f64 / rate).sin())
            .collect()
    }

    #[test]
    fn pure_tone_220() {
        let (f0, conf) =
            estimate_frame_f0(&tone(220.0, 640, 16000.0), 16000, &PitchConfig::default());
        let f0 = f0.unwrap();
        assert!((f0 - 220.0).abs() / 220.0 < 0.02, "{f0}");
        assert!(conf > 0.9);
    }

    #[test]
    fn zero_frame_is_unvoiced() {
        assert_eq!(
            estimate_frame_f0(&[0.0; 640], 16000, &PitchConfig::default()),
            (None, 0.0)
        );
    }

    #[test]
    fn median_removes_isolated_spike() {
        let raw = [
            Some(110.0),
            Some(110.0),
            Some(440.0),
            Some(110.0),
            Some(110.0),
        ];
        let smoothed = median_smooth(&raw);
        assert_eq!(smoothed[2], Some(110.0));
        assert_eq!(
            median_smooth(&[None, Some(1.0), None]),
            vec![None, Some(1.0), None]
        );
    }

    #[test]
    fn no_segments_means_all_absent() {
        let clip = AudioClip::new(tone(150.0, 16000, 16000.0), 16000, "");
        let track = track_pitch(&clip, &FrameGrid::default(), &[], &PitchConfig::default());
        assert_eq!(track.len(), 98);
        assert!(track.f0_hz.iter().all(Option::is_none));
        assert!(track.voicing.iter().all(|&v| v == 0.0));
    }
}

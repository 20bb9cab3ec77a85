//! Power spectrum, mel filterbank energies, MFCCs and frame log-energy.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::Serialize;
use thiserror::Error;

use crate::audio::{frame_signal, AudioClip, FrameGrid};

pub const FFT_SIZE: usize = 512;
pub const N_MEL_FILTERS: usize = 26;
pub const N_MFCC: usize = 13;
/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

const FEATURE_MAGIC: [u8; 4] = *b"MFCF";
const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("feature file: {0}")]
    Format(String),
}

/// Power spectra of consecutive frames over a time span.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrogramSlice {
    pub start_s: f64,
    pub end_s: f64,
    pub fft_size: usize,
    pub bin_hz: f64,
    pub hop_s: f64,
    /// Start time of each row, in seconds from the beginning of the recording.
    pub frame_times_s: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
}

/// Reusable FFT plan for power spectra of a fixed size.
pub struct PowerSpectrum {
    fft_size: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl PowerSpectrum {
    pub fn new(fft_size: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Self { fft_size, fft }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `|DFT|^2` for bins `0..=fft_size/2` of a zero-padded frame.
    ///
    /// # Panics
    /// If the frame is longer than the FFT size.
    pub fn frame(&self, frame: &[f64]) -> Vec<f64> {
        assert!(frame.len() <= self.fft_size, "frame longer than fft size");
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .map(|&x| Complex::new(x, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.fft_size)
            .collect();
        self.fft.process(&mut buf);
        buf[..self.bins()].iter().map(|c| c.norm_sqr()).collect()
    }
}

pub fn power_spectrum(frames: &[Vec<f64>], fft_size: usize) -> Vec<Vec<f64>> {
    let plan = PowerSpectrum::new(fft_size);
    frames.iter().map(|f| plan.frame(f)).collect()
}

/// Spectrogram of `clip` restricted to `[from_s, to_s)`, on `grid`.
pub fn spectrogram_slice(
    clip: &AudioClip,
    grid: &FrameGrid,
    from_s: f64,
    to_s: f64,
) -> SpectrogramSlice {
    let start = clip.index_at(from_s).min(clip.len());
    let end = clip.index_at(to_s).clamp(start, clip.len());
    let sub = clip.slice(start, end);
    let frames = frame_signal(&sub, grid);
    let rate = clip.sample_rate() as f64;
    let hop_s = grid.hop_s(clip.sample_rate());
    SpectrogramSlice {
        start_s: from_s,
        end_s: to_s,
        fft_size: FFT_SIZE,
        bin_hz: rate / FFT_SIZE as f64,
        hop_s,
        frame_times_s: (0..frames.len())
            .map(|k| (start + k * grid.hop()) as f64 / rate)
            .collect(),
        frames: power_spectrum(&frames, FFT_SIZE),
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters spaced uniformly on the mel scale.
///
/// Each triangle is evaluated at the exact bin frequencies, so a bin touches
/// at most the two filters whose support contains it.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    centers_hz: Vec<f64>,
    /// `weights[f]` is `(first_bin, weights)` for filter `f`.
    weights: Vec<(usize, Vec<f64>)>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(n_filters: usize, fft_size: usize, sample_rate: u32, f_lo: f64, f_hi: f64) -> Self {
        let n_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let (m_lo, m_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_filters + 1) as f64))
            .collect();
        let weights = (0..n_filters)
            .map(|f| {
                let (left, center, right) = (edges[f], edges[f + 1], edges[f + 2]);
                let mut first = None;
                let mut w = Vec::new();
                for bin in 0..n_bins {
                    let hz = bin as f64 * bin_hz;
                    let v = if hz > left && hz <= center {
                        (hz - left) / (center - left)
                    } else if hz > center && hz < right {
                        (right - hz) / (right - center)
                    } else {
                        0.0
                    };
                    if v > 0.0 {
                        first.get_or_insert(bin);
                        w.push(v);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), w)
            })
            .collect();
        Self {
            centers_hz: edges[1..=n_filters].to_vec(),
            weights,
            n_bins,
        }
    }

    /// 26 filters over 0..8000 Hz for a 512-point FFT at 16 kHz.
    pub fn speech_default() -> Self {
        Self::new(N_MEL_FILTERS, FFT_SIZE, 16_000, 0.0, 8_000.0)
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Dense weights of filter `f` over all bins.
    pub fn dense_filter(&self, f: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_bins];
        let (first, w) = &self.weights[f];
        out[*first..*first + w.len()].copy_from_slice(w);
        out
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|(first, w)| w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn mel_energies(spec: &[Vec<f64>], bank: &MelFilterbank) -> Vec<Vec<f64>> {
    spec.iter().map(|row| bank.apply(row)).collect()
}

/// Orthonormal DCT-II of `x`, all `x.len()` coefficients.
pub fn dct2_orthonormal(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / nf).sqrt()
            } else {
                (2.0 / nf).sqrt()
            };
            let sum: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    v * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * nf))
                        .cos()
                })
                .sum();
            scale * sum
        })
        .collect()
}

/// `ln(max(e, floor))` then orthonormal DCT-II, truncated to `n_coeffs`.
pub fn mfcc(mel_rows: &[Vec<f64>], n_coeffs: usize, floor: f64) -> Vec<Vec<f64>> {
    mel_rows
        .iter()
        .map(|row| {
            let logs: Vec<f64> = row.iter().map(|&e| e.max(floor).ln()).collect();
            let mut c = dct2_orthonormal(&logs);
            c.truncate(n_coeffs);
            c
        })
        .collect()
}

/// `ln(max(sum of squares, 1e-10))` per frame.
pub fn log_energy(frames: &[Vec<f64>]) -> Vec<f64> {
    frames
        .iter()
        .map(|f| f.iter().map(|s| s * s).sum::<f64>().max(LOG_FLOOR).ln())
        .collect()
}

/// Per-frame MFCC rows and log-energies on a shared frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub mfcc: Vec<Vec<f64>>,
    pub log_energy: Vec<f64>,
    pub hop_s: f64,
    pub frame_s: f64,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.mfcc.len()
    }

    pub fn n_coeffs(&self) -> usize {
        self.mfcc.first().map_or(N_MFCC, Vec::len)
    }

    pub fn frame_time_s(&self, k: usize) -> f64 {
        k as f64 * self.hop_s
    }

    pub fn frame_times_s(&self) -> Vec<f64> {
        (0..self.n_frames()).map(|k| self.frame_time_s(k)).collect()
    }

    /// Serializes as a little-endian header followed by `f32` rows of
    /// `[log_energy, c0, .., c{n-1}]`.
    ///
    /// Header: magic `MFCF`, version `u32`, `n_frames u32`, `n_coeffs u32`,
    /// `hop_s f32`, `frame_s f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n_coeffs = self.n_coeffs();
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + self.n_frames() * (n_coeffs + 1) * 4);
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(n_coeffs as u32).to_le_bytes());
        out.extend_from_slice(&(self.hop_s as f32).to_le_bytes());
        out.extend_from_slice(&(self.frame_s as f32).to_le_bytes());
        for (row, e) in self.mfcc.iter().zip(&self.log_energy) {
            out.extend_from_slice(&(*e as f32).to_le_bytes());
            for c in row {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses [`FeatureMatrix::to_bytes`] output. Values come back at `f32`
    /// precision, so `to_bytes(from_bytes(b)) == b` holds bit for bit.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(FeatureError::Format("truncated header".into()));
        }
        if bytes[0..4] != FEATURE_MAGIC {
            return Err(FeatureError::Format("bad magic".into()));
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let version = u32::from_le_bytes(word(4));
        if version != FEATURE_VERSION {
            return Err(FeatureError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let n_frames = u32::from_le_bytes(word(8)) as usize;
        let n_coeffs = u32::from_le_bytes(word(12)) as usize;
        let hop_s = f32::from_le_bytes(word(16)) as f64;
        let frame_s = f32::from_le_bytes(word(20)) as f64;
        let row_len = n_coeffs + 1;
        let expected = n_frames
            .checked_mul(row_len * 4)
            .and_then(|n| n.checked_add(FEATURE_HEADER_LEN))
            .ok_or_else(|| FeatureError::Format("size overflow".into()))?;
        if bytes.len() != expected {
            return Err(FeatureError::Format(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes[FEATURE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut mfcc = Vec::with_capacity(n_frames);
        let mut log_energy = Vec::with_capacity(n_frames);
        for row in values.chunks_exact(row_len) {
            log_energy.push(row[0]);
            mfcc.push(row[1..].to_vec());
        }
        Ok(Self {
            mfcc,
            log_energy,
            hop_s,
            frame_s,
        })
    }
}

/// Full front end: framing, power spectrum, mel energies, MFCC and log-energy.
pub struct FeatureExtractor {
    grid: FrameGrid,
    spectrum: PowerSpectrum,
    bank: MelFilterbank,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(FrameGrid::default())
    }
}

impl FeatureExtractor {
    pub fn new(grid: FrameGrid) -> Self {
        Self {
            grid,
            spectrum: PowerSpectrum::new(FFT_SIZE),
            bank: MelFilterbank::speech_default(),
        }
    }

    pub fn grid(&self) -> &FrameGrid {
        &self.grid
    }

    pub fn extract(&self, clip: &AudioClip) -> FeatureMatrix {
        let frames = frame_signal(clip, &self.grid);
        let spec: Vec<Vec<f64>> = frames.iter().map(|f| self.spectrum.frame(f)).collect();
        let mel = mel_energies(&spec, &self.bank);
        FeatureMatrix {
            mfcc: mfcc(&mel, N_MFCC, LOG_FLOOR),
            // raw windowed energy: pre-emphasis would mute low voiced sounds
            log_energy: log_energy(&frame_signal(clip, &self.grid.without_pre_emphasis())),
            hop_s: self.grid.hop_s(clip.sample_rate()),
            frame_s: self.grid.frame_s(clip.sample_rate()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_frame_has_zero_spectrum() {
        let spec = power_spectrum(&[vec![0.0; 400]], FFT_SIZE);
        assert_eq!(spec[0].len(), 257);
        assert!(spec[0].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn impulse_gives_flat_unit_spectrum() {
        let mut frame = vec![0.0; 400];
        frame[0] = 1.0;
        let spec = power_spectrum(&[frame], FFT_SIZE);
        assert!(spec[0].iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn one_khz_sine_peaks_at_bin_32() {
        let frame: Vec<f64> = (0..400)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let spec = power_spectrum(&[frame], FFT_SIZE);
        let argmax = spec[0]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 32);
    }

    #[test]
    fn zero_spectrum_gives_zero_mel() {
        let bank = MelFilterbank::speech_default();
        let mel = bank.apply(&vec![0.0; 257]);
        assert_eq!(mel.len(), 26);
        assert!(mel.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn single_bin_touches_at_most_two_filters() {
        let bank = MelFilterbank::speech_default();
        for bin in 0..257 {
            let mut spec = vec![0.0; 257];
            spec[bin] = 1.0;
            let nonzero = bank.apply(&spec).iter().filter(|&&e| e > 0.0).count();
            assert!(nonzero <= 2, "bin {bin} touched {nonzero} filters");
        }
    }

    #[test]
    fn filter_centers_increase_inside_band() {
        let bank = MelFilterbank::speech_default();
        let c = bank.centers_hz();
        assert_eq!(c.len(), 26);
        assert!(c[0] > 0.0 && c[25] < 8000.0);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        // closed form for the first center: one mel step above 0
        let step = hz_to_mel(8000.0) / 27.0;
        assert!((c[0] - mel_to_hz(step)).abs() < 1e-9);
    }

    #[test]
    fn filters_nonnegative_and_unimodal() {
        let bank = MelFilterbank::speech_default();
        for f in 0..bank.len() {
            let w = bank.dense_filter(f);
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!(w.iter().any(|&x| x > 0.0), "filter {f} is empty");
            let peak = w
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert!(w[..=peak].windows(2).all(|p| p[0] <= p[1]));
            assert!(w[peak..].windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn zero_mel_row_mfcc() {
        let c = &mfcc(&[vec![0.0; 26]], 13, LOG_FLOOR)[0];
        assert!((c[0] - LOG_FLOOR.ln() * 26f64.sqrt()).abs() < 1e-9);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn mel_gain_only_moves_c0() {
        let row: Vec<f64> = (0..26).map(|i| 0.5 + i as f64 * 0.37).collect();
        let gained: Vec<f64> = row.iter().map(|e| e * 9.0).collect();
        let a = &mfcc(&[row], 13, LOG_FLOOR)[0];
        let b = &mfcc(&[gained], 13, LOG_FLOOR)[0];
        for k in 1..13 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
        assert!((b[0] - a[0] - 9f64.ln() * 26f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn zero_frame_log_energy_is_floor() {
        let e = log_energy(&[vec![0.0; 400]]);
        assert!((e[0] - (-23.025850929940457)).abs() < 1e-12);
    }

    #[test]
    fn constant_frame_log_energy_is_window_energy() {
        let w = crate::audio::hamming(400);
        let expected: f64 = w.iter().map(|x| x * x).sum::<f64>().ln();
        let e = log_energy(std::slice::from_ref(&w));
        assert!((e[0] - expected).abs() < 1e-12);
        let doubled: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let e2 = log_energy(&[doubled]);
        assert!((e2[0] - e[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn feature_file_rejects_garbage() {
        assert!(FeatureMatrix::from_bytes(b"nope").is_err());
        let fm = FeatureMatrix {
            mfcc: vec![vec![1.0; 13]; 3],
            log_energy: vec![0.5; 3],
            hop_s: 0.01,
            frame_s: 0.025,
        };
        let bytes = fm.to_bytes();
        assert!(FeatureMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(FeatureMatrix::from_bytes(&bad).is_err());
    }
}

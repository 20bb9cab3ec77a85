//! Decoding, resampling and framing of recordings.
//!
//! Everything downstream works on [`AudioClip`]s at [`CANONICAL_RATE`] mono.
//! Samples are held as `f64` so that gain and round-trip properties of the
//! feature pipeline hold to tight tolerances.

use std::f64::consts::PI;

use thiserror::Error;

/// Sample rate every analysis stage expects.
pub const CANONICAL_RATE: u32 = 16_000;

/// Target rates accepted by [`resample`].
pub const SUPPORTED_RATES: [u32; 4] = [8_000, 16_000, 44_100, 48_000];

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_IEEE_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AudioError {
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedRate(u32),
}

/// Mono PCM samples with timing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    source_id: String,
}

impl AudioClip {
    /// Builds a clip, clamping every sample into `[-1, 1]`. Non-finite
    /// samples become silence.
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        let samples = samples
            .into_iter()
            .map(|s| {
                if s.is_finite() {
                    s.clamp(-1.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn with_source_id(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    /// Sample-accurate sub-clip `[start, end)`, by sample index.
    pub fn slice(&self, start: usize, end: usize) -> AudioClip {
        AudioClip {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
            source_id: self.source_id.clone(),
        }
    }

    /// Index of the sample at time `t_s`, rounded to the nearest sample.
    pub fn index_at(&self, t_s: f64) -> usize {
        (t_s * self.sample_rate as f64).round().max(0.0) as usize
    }

    /// Multiplies all samples by `gain` (result clamped into `[-1, 1]`).
    pub fn scaled(&self, gain: f64) -> AudioClip {
        AudioClip::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
            self.source_id.clone(),
        )
    }
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk, AudioError> {
    if body.len() < 16 {
        return Err(AudioError::MalformedContainer("fmt chunk too short".into()));
    }
    let mut format = read_u16(body, 0);
    let channels = read_u16(body, 2);
    let sample_rate = read_u32(body, 4);
    let bits_per_sample = read_u16(body, 14);
    if format == FORMAT_EXTENSIBLE {
        // cbSize(2) validBits(2) channelMask(4) subformat GUID(16)
        if body.len() < 40 {
            return Err(AudioError::MalformedContainer(
                "extensible fmt chunk too short".into(),
            ));
        }
        format = read_u16(body, 24);
    }
    if channels == 0 {
        return Err(AudioError::MalformedContainer("zero channels".into()));
    }
    if sample_rate == 0 {
        return Err(AudioError::MalformedContainer("zero sample rate".into()));
    }
    Ok(FmtChunk {
        format,
        channels,
        sample_rate,
        bits_per_sample,
    })
}

/// Decodes a RIFF/WAVE container holding 16-bit integer or 32-bit float PCM.
///
/// Multi-channel input is averaged to mono. Integer samples are scaled by
/// `1/32768`, so `-32768` maps to exactly `-1.0`.
pub fn decode_recording(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedContainer(
            "missing RIFF/WAVE header".into(),
        ));
    }
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                AudioError::MalformedContainer(format!(
                    "chunk {:?} overruns container",
                    String::from_utf8_lossy(id)
                ))
            })?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => fmt = Some(parse_fmt(body)?),
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (size & 1);
        if data.is_some() && fmt.is_some() {
            break;
        }
    }
    let fmt = fmt.ok_or_else(|| AudioError::MalformedContainer("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::MalformedContainer("no data chunk".into()))?;

    let channels = fmt.channels as usize;
    let samples: Vec<f64> = match (fmt.format, fmt.bits_per_sample) {
        (FORMAT_PCM, 16) => {
            let frame_bytes = 2 * channels;
            if data.len() % frame_bytes != 0 {
                return Err(AudioError::MalformedContainer(
                    "data length is not a whole number of frames".into(),
                ));
            }
            data.chunks_exact(frame_bytes)
                .map(|frame| {
                    let sum: f64 = frame
                        .chunks_exact(2)
                        .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                        .sum();
                    sum / channels as f64
                })
                .collect()
        }
        (FORMAT_IEEE_FLOAT, 32) => {
            let frame_bytes = 4 * channels;
            if data.len() % frame_bytes != 0 {
                return Err(AudioError::MalformedContainer(
                    "data length is not a whole number of frames".into(),
                ));
            }
            data.chunks_exact(frame_bytes)
                .map(|frame| {
                    let sum: f64 = frame
                        .chunks_exact(4)
                        .map(|s| f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64)
                        .sum();
                    sum / channels as f64
                })
                .collect()
        }
        (FORMAT_PCM, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "{bits}-bit integer PCM"
            )))
        }
        (FORMAT_IEEE_FLOAT, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!("{bits}-bit float")))
        }
        (format, _) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "format tag {format:#06x}"
            )))
        }
    };
    Ok(AudioClip::new(samples, fmt.sample_rate, ""))
}

fn wav_header(data_len: u32, sample_rate: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(44);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out
}

/// Quantizes a sample to 16-bit: `round(x * 32768)` saturated to the i16 range.
pub fn quantize_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a clip as 16-bit mono RIFF/PCM at the clip's own rate.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = (clip.len() * 2) as u32;
    let mut out = wav_header(data_len, clip.sample_rate());
    out.reserve(data_len as usize);
    for &s in clip.samples() {
        out.extend_from_slice(&quantize_i16(s).to_le_bytes());
    }
    out
}

/// Encodes a clip as 32-bit float RIFF, with `channels` identical copies of
/// the signal. Mostly useful for fixtures.
pub fn encode_wav_f32(clip: &AudioClip, channels: u16) -> Vec<u8> {
    let data_len = (clip.len() * 4 * channels as usize) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_IEEE_FLOAT.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * 4 * channels as u32).to_le_bytes());
    out.extend_from_slice(&(4 * channels).to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in clip.samples() {
        for _ in 0..channels {
            out.extend_from_slice(&(s as f32).to_le_bytes());
        }
    }
    out
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Zero crossings of the interpolation kernel on each side, measured at the
/// lower of the two rates.
const SINC_ZERO_CROSSINGS: usize = 48;
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the lower Nyquist frequency.
const CUTOFF_FRACTION: f64 = 0.97;

/// Band-limited resampling by windowed-sinc (Kaiser) interpolation.
///
/// The output holds `round(N * target / source)` samples, so durations are
/// preserved within one output sample period.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if !SUPPORTED_RATES.contains(&target_rate) {
        return Err(AudioError::UnsupportedRate(target_rate));
    }
    let source_rate = clip.sample_rate();
    if source_rate == target_rate {
        return Ok(clip.clone());
    }
    let g = gcd(source_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g; // phases per input step
    let down = source_rate as u64 / g;

    // cutoff relative to the input sample rate (cycles per input sample)
    let ratio = (target_rate as f64 / source_rate as f64).min(1.0);
    let cutoff = 0.5 * ratio * CUTOFF_FRACTION;
    let half_width = (SINC_ZERO_CROSSINGS as f64 / ratio).ceil() as i64;
    let taps = (2 * half_width + 1) as usize;
    let i0_beta = bessel_i0(KAISER_BETA);

    // Output sample n sits at input position n*down/up = base + phase/up.
    // The table row for `phase` holds weights for input offsets
    // -half_width..=half_width around `base`.
    let table: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            (0..taps)
                .map(|j| {
                    let offset = j as i64 - half_width;
                    let dist = offset as f64 - frac;
                    let r = dist / (half_width as f64 + 1.0);
                    if r.abs() >= 1.0 {
                        return 0.0;
                    }
                    let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
                    2.0 * cutoff * sinc(2.0 * cutoff * dist) * window
                })
                .collect()
        })
        .collect();

    let input = clip.samples();
    let n_in = input.len() as u64;
    let n_out = ((n_in as u128 * target_rate as u128 + source_rate as u128 / 2)
        / source_rate as u128) as usize;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let phase = (pos % up) as usize;
        let weights = &table[phase];
        let lo = base - half_width;
        let mut acc = 0.0;
        for (j, w) in weights.iter().enumerate() {
            let idx = lo + j as i64;
            if idx >= 0 && (idx as u64) < n_in {
                acc += w * input[idx as usize];
            }
        }
        out.push(acc);
    }
    Ok(AudioClip::new(out, target_rate, clip.source_id()))
}

/// Decodes then brings the clip to [`CANONICAL_RATE`].
pub fn load_canonical(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    let clip = decode_recording(bytes)?;
    if clip.sample_rate() == CANONICAL_RATE {
        return Ok(clip);
    }
    // arbitrary source rates are fine; only the target is restricted
    resample(&clip, CANONICAL_RATE)
}

/// Framing parameters shared by every per-frame track.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid {
    frame_length: usize,
    hop: usize,
    window: Vec<f64>,
    pre_emphasis: f64,
}

impl Default for FrameGrid {
    /// 25 ms Hamming frames every 10 ms at 16 kHz, pre-emphasis 0.97.
    fn default() -> Self {
        Self::new(400, 160, 0.97)
    }
}

impl FrameGrid {
    /// # Panics
    /// If `hop` is zero or larger than `frame_length`.
    pub fn new(frame_length: usize, hop: usize, pre_emphasis: f64) -> Self {
        assert!(
            hop > 0 && hop <= frame_length,
            "hop must be in 1..=frame_length"
        );
        Self {
            frame_length,
            hop,
            window: hamming(frame_length),
            pre_emphasis,
        }
    }

    /// The same grid with pre-emphasis switched off.
    pub fn without_pre_emphasis(&self) -> Self {
        Self {
            pre_emphasis: 0.0,
            ..self.clone()
        }
    }

    pub fn frame_length(&self) -> usize {
        self.frame_length
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn pre_emphasis(&self) -> f64 {
        self.pre_emphasis
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_length {
            0
        } else {
            (n_samples - self.frame_length) / self.hop + 1
        }
    }

    pub fn hop_s(&self, sample_rate: u32) -> f64 {
        self.hop as f64 / sample_rate as f64
    }

    pub fn frame_s(&self, sample_rate: u32) -> f64 {
        self.frame_length as f64 / sample_rate as f64
    }
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Pre-emphasis `y[n] = x[n] - a*x[n-1]` over the whole signal, `y[0] = x[0]`.
pub fn pre_emphasize(samples: &[f64], coefficient: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = 0.0;
    for &x in samples {
        out.push(x - coefficient * prev);
        prev = x;
    }
    out
}

/// Pre-emphasizes the clip, cuts it into frames on `grid`, and windows each
/// frame. Frame `k` covers samples `[k*hop, k*hop + frame_length)`.
pub fn frame_signal(clip: &AudioClip, grid: &FrameGrid) -> Vec<Vec<f64>> {
    let emphasized = pre_emphasize(clip.samples(), grid.pre_emphasis);
    (0..grid.frame_count(emphasized.len()))
        .map(|k| {
            let start = k * grid.hop;
            emphasized[start..start + grid.frame_length]
                .iter()
                .zip(&grid.window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm16_wav(samples: &[i16], channels: u16, rate: u32) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn silence_decodes_to_zero_clip() {
        let clip = decode_recording(&pcm16_wav(&vec![0; 16000], 1, 16000)).unwrap();
        assert_eq!(clip.len(), 16000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
        assert_eq!(clip.duration_s(), 1.0);
        assert_eq!(clip.sample_rate(), 16000);
    }

    #[test]
    fn four_channel_symmetric_average_is_zero() {
        let frame = [16384i16, -16384, 16384, -16384];
        let samples: Vec<i16> = frame.iter().copied().cycle().take(4 * 1000).collect();
        let clip = decode_recording(&pcm16_wav(&samples, 4, 16000)).unwrap();
        assert_eq!(clip.len(), 1000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn float_four_channel_average() {
        let clip = AudioClip::new(vec![0.5; 100], 16000, "");
        let decoded = decode_recording(&encode_wav_f32(&clip, 4)).unwrap();
        assert_eq!(decoded.samples(), clip.samples());
    }

    #[test]
    fn most_negative_sample_is_minus_one() {
        let clip = decode_recording(&pcm16_wav(&[-32768, 32767], 1, 16000)).unwrap();
        assert_eq!(clip.samples()[0], -1.0);
        assert!(clip.samples()[1] < 1.0);
        assert_eq!(encode_wav(&clip), pcm16_wav(&[-32768, 32767], 1, 16000));
    }

    #[test]
    fn compressed_codecs_are_unsupported() {
        let mut bytes = pcm16_wav(&[0; 10], 1, 16000);
        bytes[20] = 0x55; // MPEG layer 3 tag
        assert!(matches!(
            decode_recording(&bytes),
            Err(AudioError::UnsupportedEncoding(_))
        ));
    }

    #[test]
    fn truncated_container_is_malformed() {
        let bytes = pcm16_wav(&[0; 100], 1, 16000);
        assert!(matches!(
            decode_recording(&bytes[..100]),
            Err(AudioError::MalformedContainer(_))
        ));
        assert!(matches!(
            decode_recording(b"RIFX0000WAVE"),
            Err(AudioError::MalformedContainer(_))
        ));
        assert!(matches!(
            decode_recording(&[]),
            Err(AudioError::MalformedContainer(_))
        ));
    }

    #[test]
    fn skips_unknown_chunks() {
        let plain = pcm16_wav(&[1, 2, 3], 1, 16000);
        let mut bytes = plain[..12].to_vec();
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 0]); // odd size plus pad byte
        bytes.extend_from_slice(&plain[12..]);
        let clip = decode_recording(&bytes).unwrap();
        assert_eq!(clip.len(), 3);
    }

    #[test]
    fn resample_identity_at_same_rate() {
        let clip = AudioClip::new(vec![0.1, -0.2, 0.3], 16000, "x");
        assert_eq!(resample(&clip, 16000).unwrap(), clip);
    }

    #[test]
    fn resample_rejects_unlisted_rate() {
        let clip = AudioClip::new(vec![0.0; 10], 16000, "");
        assert_eq!(
            resample(&clip, 22050),
            Err(AudioError::UnsupportedRate(22050))
        );
    }

    #[test]
    fn resample_conserves_duration() {
        let clip = AudioClip::new(vec![0.0; 44100], 44100, "");
        let out = resample(&clip, 16000).unwrap();
        assert!((out.len() as i64 - 16000).abs() <= 1);
        assert_eq!(out.sample_rate(), 16000);
    }

    #[test]
    fn frame_count_boundaries() {
        let grid = FrameGrid::default();
        assert_eq!(grid.frame_count(16000), 98);
        assert_eq!(grid.frame_count(399), 0);
        assert_eq!(grid.frame_count(400), 1);
        let clip = AudioClip::new(vec![0.0; 399], 16000, "");
        assert!(frame_signal(&clip, &grid).is_empty());
    }

    #[test]
    fn hamming_weights_in_range() {
        let w = hamming(400);
        assert_eq!(w.len(), 400);
        assert!(w.iter().all(|&x| x > 0.0 && x <= 1.08));
    }

    #[test]
    fn dc_signal_after_pre_emphasis() {
        let grid = FrameGrid::default();
        let clip = AudioClip::new(vec![0.5; 2000], 16000, "");
        let frames = frame_signal(&clip, &grid);
        let w = grid.window();
        // first frame: first sample of the clip keeps the full value
        assert!((frames[0][0] - 0.5 * w[0]).abs() < 1e-12);
        for (k, frame) in frames.iter().enumerate() {
            for (n, &v) in frame.iter().enumerate() {
                if k == 0 && n == 0 {
                    continue;
                }
                assert!((v - 0.03 * 0.5 * w[n]).abs() < 1e-12);
            }
        }
    }
}

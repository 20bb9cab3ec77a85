//! Deterministic signal fixtures and slow reference implementations used as
//! test oracles. Nothing here depends on the analysis crate, so an oracle
//! can never share a bug with the code it checks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sine(freq_hz: f64, rate: u32, n: usize, amp: f64) -> Vec<f64> {
    (0..n)
        .map(|i| amp * (2.0 * PI * freq_hz * i as f64 / rate as f64).sin())
        .collect()
}

/// Sum of harmonics `k·f0` with amplitudes `amps[k-1]`, skipping any at or
/// above Nyquist.
pub fn harmonic(f0_hz: f64, amps: &[f64], rate: u32, n: usize) -> Vec<f64> {
    let nyquist = rate as f64 / 2.0;
    let mut out = vec![0.0; n];
    for (k, a) in amps.iter().enumerate() {
        let f = f0_hz * (k + 1) as f64;
        if f >= nyquist {
            break;
        }
        for (i, y) in out.iter_mut().enumerate() {
            *y += a * (2.0 * PI * f * i as f64 / rate as f64).sin();
        }
    }
    out
}

/// Linear chirp from `f_start` to `f_end` over `n` samples. Returns the
/// signal and a function giving the instantaneous frequency at time `t`.
pub fn chirp(
    f_start: f64,
    f_end: f64,
    rate: u32,
    n: usize,
    amp: f64,
) -> (Vec<f64>, impl Fn(f64) -> f64) {
    let dur = n as f64 / rate as f64;
    let k = (f_end - f_start) / dur;
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            amp * (2.0 * PI * (f_start * t + 0.5 * k * t * t)).sin()
        })
        .collect();
    (x, move |t: f64| f_start + k * t)
}

pub fn white_noise(rng: &mut impl Rng, n: usize, sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).unwrap();
    (0..n).map(|_| normal.sample(rng)).collect()
}

pub fn gaussian_vec(rng: &mut impl Rng, mean: &[f64], sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).unwrap();
    mean.iter().map(|m| m + normal.sample(rng)).collect()
}

/// Direct O(n²) DFT of `x` zero-padded to `n`, bins `0..=n/2`, as (re, im).
pub fn naive_dft(x: &[f64], n: usize) -> Vec<(f64, f64)> {
    (0..=n / 2)
        .map(|k| {
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, v) in x.iter().enumerate() {
                let phase = -2.0 * PI * (k * t % n) as f64 / n as f64;
                re += v * phase.cos();
                im += v * phase.sin();
            }
            (re, im)
        })
        .collect()
}

pub fn naive_power(x: &[f64], n: usize) -> Vec<f64> {
    naive_dft(x, n)
        .into_iter()
        .map(|(r, i)| r * r + i * i)
        .collect()
}

/// Frequency of the strongest DFT bin of `x` (zero-padded to its own
/// length), excluding DC.
pub fn dominant_frequency(x: &[f64], rate: u32) -> f64 {
    let n = x.len();
    let power = naive_power(x, n);
    let (k, _) = power
        .iter()
        .enumerate()
        .skip(1)
        .fold(
            (0, f64::MIN),
            |best, (k, &p)| if p > best.1 { (k, p) } else { best },
        );
    k as f64 * rate as f64 / n as f64
}

/// Inverse of the orthonormal DCT-II, written out term by term.
pub fn inverse_dct2_orthonormal(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let nf = n as f64;
    (0..n)
        .map(|i| {
            let mut acc = c[0] * (1.0 / nf).sqrt();
            for (k, ck) in c.iter().enumerate().skip(1) {
                acc += ck
                    * (2.0 / nf).sqrt()
                    * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * nf)).cos();
            }
            acc
        })
        .collect()
}

/// ln N(x; mean, diag(var)).
pub fn diag_gaussian_log_likelihood(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut ll = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        ll += -0.5 * ((2.0 * PI * vi).ln() + (xi - mi) * (xi - mi) / vi);
    }
    ll
}

/// Posterior over classes from per-class log-likelihoods and priors, via an
/// explicit max-shift and plain exponentials.
pub fn bayes_posteriors(log_likelihoods: &[f64], priors: &[f64]) -> Vec<f64> {
    let joint: Vec<f64> = log_likelihoods
        .iter()
        .zip(priors)
        .map(|(ll, p)| {
            if *p > 0.0 {
                ll + p.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let top = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = joint.iter().map(|j| (j - top).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|u| u / total).collect()
}

/// Classic perceptron. Returns a separating `(w, b)` with `w·x + b > 0` on
/// `pos` and `< 0` on `neg`, or `None` if none was found in `max_epochs`.
pub fn perceptron(
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    max_epochs: usize,
) -> Option<(Vec<f64>, f64)> {
    let dim = pos.first().or(neg.first())?.len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let data: Vec<(&Vec<f64>, f64)> = pos
        .iter()
        .map(|x| (x, 1.0))
        .chain(neg.iter().map(|x| (x, -1.0)))
        .collect();
    for _ in 0..max_epochs {
        let mut clean = true;
        for (x, y) in &data {
            let f: f64 = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() + b;
            if y * f <= 0.0 {
                clean = false;
                for (wi, xi) in w.iter_mut().zip(x.iter()) {
                    *wi += y * xi;
                }
                b += y;
            }
        }
        if clean {
            return Some((w, b));
        }
    }
    None
}

/// Error of `estimate` against `reference` as RMS ratio in dB.
pub fn rms_error_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let n = reference.len().min(estimate.len());
    let err: f64 = (0..n).map(|i| (reference[i] - estimate[i]).powi(2)).sum();
    let sig: f64 = reference[..n].iter().map(|v| v * v).sum();
    10.0 * (err / sig).log10()
}

/// Sample median; averages the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Voice {
    Therapist,
    Client,
}

/// Sounds a synthetic client utters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sound {
    /// Bright harmonic tone, vowel-like.
    Vowel,
    /// Harmonic tone with a strong fundamental and upper partials but a
    /// weak middle, like a close vowel.
    CloseVowel,
    /// Differenced white noise, fricative-like.
    Fricative,
    /// Silence inside a turn.
    Pause,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Span<T> {
    pub start_s: f64,
    pub end_s: f64,
    pub what: T,
}

pub const THERAPIST_F0: f64 = 110.0;
pub const CLIENT_F0: f64 = 210.0;
const DITHER: f64 = 1e-4;
const FADE_S: f64 = 0.005;

fn therapist_amps() -> Vec<f64> {
    (1..=10).map(|k| 0.3 / (k * k) as f64).collect()
}

fn client_amps() -> Vec<f64> {
    (1..=16)
        .map(|k| if k % 2 == 0 { 0.06 } else { 0.04 })
        .collect()
}

fn close_vowel_amps() -> Vec<f64> {
    (1..=16)
        .map(|k| match k {
            1 => 0.08,
            2..=9 => 0.01,
            _ => 0.05,
        })
        .collect()
}

fn fade(x: &mut [f64], rate: u32) {
    let m = ((FADE_S * rate as f64) as usize).min(x.len() / 2);
    for i in 0..m {
        let g = 0.5 - 0.5 * (PI * i as f64 / m as f64).cos();
        x[i] *= g;
        let j = x.len() - 1 - i;
        x[j] *= g;
    }
}

/// Builds a two-voice recording piece by piece on a low dither floor,
/// recording ground truth as it goes.
pub struct SessionBuilder {
    rate: u32,
    rng: ChaCha8Rng,
    samples: Vec<f64>,
    turns: Vec<Span<Voice>>,
    sounds: Vec<Span<Sound>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSession {
    pub rate: u32,
    pub samples: Vec<f64>,
    pub turns: Vec<Span<Voice>>,
    /// Client sounds only.
    pub sounds: Vec<Span<Sound>>,
}

impl SessionBuilder {
    pub fn new(rate: u32, seed: u64) -> Self {
        Self {
            rate,
            rng: rng(seed),
            samples: Vec::new(),
            turns: Vec::new(),
            sounds: Vec::new(),
        }
    }

    fn now_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate as f64
    }

    fn n(&self, dur_s: f64) -> usize {
        (dur_s * self.rate as f64).round() as usize
    }

    pub fn silence(mut self, dur_s: f64) -> Self {
        let n = self.n(dur_s);
        self.samples.extend(std::iter::repeat_n(0.0, n));
        self
    }

    fn sound(&mut self, sound: Sound, f0: f64, dur_s: f64) {
        let n = self.n(dur_s);
        let mut x = match sound {
            Sound::Vowel => harmonic(f0, &client_amps(), self.rate, n),
            Sound::CloseVowel => harmonic(f0, &close_vowel_amps(), self.rate, n),
            Sound::Fricative => {
                let w = white_noise(&mut self.rng, n + 1, 0.08);
                w.windows(2).map(|p| p[1] - p[0]).collect()
            }
            Sound::Pause => vec![0.0; n],
        };
        fade(&mut x, self.rate);
        self.samples.extend(x);
    }

    pub fn therapist(mut self, dur_s: f64) -> Self {
        let start_s = self.now_s();
        let n = self.n(dur_s);
        let rate = self.rate;
        let mut x = harmonic(THERAPIST_F0, &therapist_amps(), rate, n);
        for (i, v) in x.iter_mut().enumerate() {
            *v *= 0.75 + 0.25 * (2.0 * PI * 3.0 * i as f64 / rate as f64).sin();
        }
        fade(&mut x, rate);
        self.samples.extend(x);
        self.turns.push(Span {
            start_s,
            end_s: self.now_s(),
            what: Voice::Therapist,
        });
        self
    }

    /// One client turn made of `(sound, duration)` pieces.
    pub fn client(mut self, script: &[(Sound, f64)]) -> Self {
        let turn_start = self.now_s();
        for &(sound, dur) in script {
            let start_s = self.now_s();
            self.sound(sound, CLIENT_F0, dur);
            self.sounds.push(Span {
                start_s,
                end_s: self.now_s(),
                what: sound,
            });
        }
        self.turns.push(Span {
            start_s: turn_start,
            end_s: self.now_s(),
            what: Voice::Client,
        });
        self
    }

    pub fn build(mut self) -> SyntheticSession {
        let dither = white_noise(&mut self.rng, self.samples.len(), DITHER);
        for (s, d) in self.samples.iter_mut().zip(dither) {
            *s += d;
        }
        SyntheticSession {
            rate: self.rate,
            samples: self.samples,
            turns: self.turns,
            sounds: self.sounds,
        }
    }
}

/// Vowels alternating with fricatives for `dur_s` seconds, cycling through
/// two vowels so no phone or phone pair repeats back to back.
pub fn fluent_script(dur_s: f64) -> Vec<(Sound, f64)> {
    let mut out = Vec::new();
    let mut t = 0.0;
    let pattern = [
        (Sound::Vowel, 0.2),
        (Sound::Fricative, 0.1),
        (Sound::CloseVowel, 0.15),
        (Sound::Fricative, 0.08),
    ];
    let mut k = 0;
    while t < dur_s {
        let (s, d) = pattern[k % pattern.len()];
        out.push((s, d));
        t += d;
        k += 1;
    }
    out
}

/// A single voice speaking continuously for `dur_s`, for enrollment.
pub fn voice_clip(voice: Voice, dur_s: f64, rate: u32, seed: u64) -> Vec<f64> {
    // enough silence around the speech for the noise-floor percentile
    let b = SessionBuilder::new(rate, seed).silence(1.0);
    let b = match voice {
        Voice::Therapist => b.therapist(dur_s),
        Voice::Client => b.client(&fluent_script(dur_s)),
    };
    b.silence(1.0).build().samples
}

/// The 30 s two-speaker session used by the end-to-end checks. The client
/// speaks first; client turns contain a prolonged fricative, a repeated
/// syllable and a 0.8 s block.
pub fn thirty_second_session(seed: u64) -> SyntheticSession {
    use Sound::*;
    // fluent_script ends on a fricative; the pieces below avoid putting the
    // same sound twice in a row or alternating two sounds, so only the
    // planted events match a rule
    let mut stutter_turn = fluent_script(1.0);
    stutter_turn.extend([
        (Vowel, 0.15),
        (Fricative, 0.6),
        (CloseVowel, 0.2),
        (Fricative, 0.1),
    ]);
    stutter_turn.extend([
        (Vowel, 0.15),
        (Pause, 0.8),
        (CloseVowel, 0.2),
        (Fricative, 0.1),
        (Vowel, 0.2),
    ]);
    stutter_turn.extend(fluent_script(1.5));
    let mut repeat_turn = vec![(Fricative, 0.1), (Vowel, 0.12), (Pause, 0.08)];
    repeat_turn.extend([(Fricative, 0.1), (Vowel, 0.12), (Pause, 0.08)]);
    repeat_turn.extend([(Fricative, 0.1), (Vowel, 0.12)]);
    repeat_turn.extend(fluent_script(2.0));

    SessionBuilder::new(16_000, seed)
        .silence(0.5)
        .client(&fluent_script(4.0))
        .silence(1.0)
        .therapist(4.0)
        .silence(1.0)
        .client(&stutter_turn)
        .silence(1.0)
        .therapist(3.5)
        .silence(0.8)
        .client(&repeat_turn)
        .silence(1.0)
        .therapist(3.0)
        .silence(0.7)
        .client(&fluent_script(1.2))
        .silence(30.0)
        .truncate(30.0)
}

/// Ground truth as a `start end phone` label track: client vowels as "aa"
/// and "iy", fricatives as "s", therapist speech as "ah" and everything else "sil".
pub fn label_track(session: &SyntheticSession) -> String {
    let mut spans: Vec<(f64, f64, &str)> = session
        .sounds
        .iter()
        .map(|s| {
            let phone = match s.what {
                Sound::Vowel => "aa",
                Sound::CloseVowel => "iy",
                Sound::Fricative => "s",
                Sound::Pause => "sil",
            };
            (s.start_s, s.end_s, phone)
        })
        .chain(
            session
                .turns
                .iter()
                .filter(|t| t.what == Voice::Therapist)
                .map(|t| (t.start_s, t.end_s, "ah")),
        )
        .collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = session.samples.len() as f64 / session.rate as f64;
    let mut out = String::new();
    let mut t = 0.0;
    for (start, end, phone) in spans {
        if start > t {
            out.push_str(&format!("{t:.6} {start:.6} sil\n"));
        }
        out.push_str(&format!("{start:.6} {end:.6} {phone}\n"));
        t = end;
    }
    if total > t {
        out.push_str(&format!("{t:.6} {total:.6} sil\n"));
    }
    out
}

impl SessionBuilder {
    /// Cuts the recording to `dur_s`, dropping ground truth beyond it.
    fn truncate(self, dur_s: f64) -> SyntheticSession {
        let n = self.n(dur_s);
        let mut s = self.build();
        s.samples.truncate(n);
        s.turns.retain(|t| t.start_s < dur_s);
        s.turns
            .iter_mut()
            .for_each(|t| t.end_s = t.end_s.min(dur_s));
        s.sounds.retain(|t| t.start_s < dur_s);
        s.sounds
            .iter_mut()
            .for_each(|t| t.end_s = t.end_s.min(dur_s));
        s
    }
}

//! Phone posteriors, phonological-category posteriors, and phone decoding.

mod model;
mod set;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::time::round_ms;

pub use model::{
    train_reference_model, AcousticModel, GaussianPhoneModel, UniformModel, MIN_EXAMPLES_PER_PHONE,
    UNTRAINED_PRIOR_WEIGHT, VARIANCE_FLOOR,
};
pub use set::{Category, PhoneSet, SILENCE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhoneError {
    #[error("feature dimension {found} does not match model input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("model emits {model} phones but the phone set has {set}")]
    PhoneCountMismatch { model: usize, set: usize },
    #[error("no phone has the minimum of {min_per_phone} training examples")]
    InsufficientData { min_per_phone: usize },
    #[error("unknown phone {0}")]
    UnknownPhone(String),
    #[error("phone set: {0}")]
    PhoneSet(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("label track line {line}: {reason}")]
    LabelTrack { line: usize, reason: String },
}

/// Shortest phone segment the decoder emits, in frames.
pub const MIN_PHONE_FRAMES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorFrame {
    pub t_s: f64,
    pub p: Vec<f64>,
}

/// Probability mass per [`Category`], in [`Category::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryFrame {
    pub t_s: f64,
    pub p: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub phone: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(rename = "conf")]
    pub mean_posterior: f64,
}

impl PhoneSegment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn is_silence(&self) -> bool {
        self.phone == SILENCE
    }
}

/// Runs the model over every feature row.
pub fn forward(
    model: &dyn AcousticModel,
    features: &FeatureMatrix,
) -> Result<Vec<PosteriorFrame>, PhoneError> {
    if features.n_frames() > 0 && features.n_coeffs() != model.input_dim() {
        return Err(PhoneError::DimensionMismatch {
            expected: model.input_dim(),
            found: features.n_coeffs(),
        });
    }
    Ok(features
        .mfcc
        .iter()
        .enumerate()
        .map(|(k, row)| PosteriorFrame {
            t_s: features.frame_time_s(k),
            p: model.posteriors(row),
        })
        .collect())
}

/// Sums phone posteriors into category posteriors.
pub fn category_posteriors(frames: &[PosteriorFrame], set: &PhoneSet) -> Vec<CategoryFrame> {
    frames
        .iter()
        .map(|frame| {
            let mut p = [0.0; 7];
            for (i, mass) in frame.p.iter().enumerate() {
                p[set.category_of(i).index()] += mass;
            }
            CategoryFrame { t_s: frame.t_s, p }
        })
        .collect()
}

fn argmax(p: &[f64]) -> usize {
    // strict comparison keeps the lowest index on ties
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct Run {
    phone: usize,
    start: usize,
    end: usize,
}

impl Run {
    fn len(&self) -> usize {
        self.end - self.start
    }
}

fn collapse(runs: &mut Vec<Run>) {
    let mut out: Vec<Run> = Vec::with_capacity(runs.len());
    for run in runs.drain(..) {
        match out.last_mut() {
            Some(last) if last.phone == run.phone => last.end = run.end,
            _ => out.push(run),
        }
    }
    *runs = out;
}

fn mean_posterior(frames: &[PosteriorFrame], run: &Run) -> f64 {
    frames[run.start..run.end]
        .iter()
        .map(|f| f.p[run.phone])
        .sum::<f64>()
        / run.len() as f64
}

/// Turns posteriors into phone segments: framewise argmax, run-length
/// collapse, then repeatedly absorbs the first run shorter than
/// [`MIN_PHONE_FRAMES`] into whichever neighbour has the higher mean
/// posterior (the preceding one on a tie).
///
/// Segment boundaries are the frame times of `frames`, with the last segment
/// ending one `hop_s` after the last frame.
pub fn decode_phones(frames: &[PosteriorFrame], set: &PhoneSet, hop_s: f64) -> Vec<PhoneSegment> {
    if frames.is_empty() {
        return Vec::new();
    }
    let mut runs: Vec<Run> = frames
        .iter()
        .enumerate()
        .map(|(k, f)| Run {
            phone: argmax(&f.p),
            start: k,
            end: k + 1,
        })
        .collect();
    collapse(&mut runs);
    while runs.len() > 1 {
        let Some(i) = runs.iter().position(|r| r.len() < MIN_PHONE_FRAMES) else {
            break;
        };
        let target = match (i.checked_sub(1), runs.get(i + 1)) {
            (Some(prev), Some(next)) => {
                if mean_posterior(frames, next) > mean_posterior(frames, &runs[prev]) {
                    next.phone
                } else {
                    runs[prev].phone
                }
            }
            (Some(prev), None) => runs[prev].phone,
            (None, Some(next)) => next.phone,
            (None, None) => unreachable!("more than one run"),
        };
        runs[i].phone = target;
        collapse(&mut runs);
    }
    runs.iter()
        .map(|run| PhoneSegment {
            phone: set.symbol(run.phone).to_string(),
            start_s: round_ms(frames[run.start].t_s),
            end_s: round_ms(frames[run.end - 1].t_s + hop_s),
            mean_posterior: mean_posterior(frames, run),
        })
        .collect()
}

/// One phone held over `[start_s, end_s)`, as in a hand-made label track.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInterval {
    pub start_s: f64,
    pub end_s: f64,
    pub phone: String,
}

/// Parses a label track: one `start end phone` per line, separated by
/// whitespace. Blank lines and lines starting with `#` are skipped.
pub fn parse_label_track(text: &str) -> Result<Vec<LabeledInterval>, PhoneError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| PhoneError::LabelTrack {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [start, end, phone] = fields[..] else {
            return Err(bad("expected `start end phone`"));
        };
        let start_s: f64 = start.parse().map_err(|_| bad("start is not a number"))?;
        let end_s: f64 = end.parse().map_err(|_| bad("end is not a number"))?;
        if !(start_s >= 0.0 && end_s > start_s) {
            return Err(bad("need 0 <= start < end"));
        }
        out.push(LabeledInterval {
            start_s,
            end_s,
            phone: phone.to_string(),
        });
    }
    Ok(out)
}

/// Training pairs for [`train_reference_model`]: every frame whose center
/// lies inside an interval, with that interval's phone. Frames outside all
/// intervals are left out.
pub fn labeled_rows(
    features: &FeatureMatrix,
    intervals: &[LabeledInterval],
    set: &PhoneSet,
) -> Result<Vec<(Vec<f64>, usize)>, PhoneError> {
    let mut indexed = Vec::with_capacity(intervals.len());
    for iv in intervals {
        let phone = set
            .index_of(&iv.phone)
            .ok_or_else(|| PhoneError::UnknownPhone(iv.phone.clone()))?;
        indexed.push((iv.start_s, iv.end_s, phone));
    }
    let half = features.frame_s / 2.0;
    Ok(features
        .mfcc
        .iter()
        .enumerate()
        .filter_map(|(k, row)| {
            let center = features.frame_time_s(k) + half;
            indexed
                .iter()
                .find(|(s, e, _)| *s <= center && center < *e)
                .map(|&(_, _, phone)| (row.clone(), phone))
        })
        .collect())
}

//! Therapist/client separation: segment embeddings and a linear soft-margin
//! classifier trained on enrollment material.
//!
//! The embedding is MFCC statistics pooling (per-coefficient mean and
//! standard deviation). The mean of `c0` is zeroed so that loudness cannot act
//! as the speaker cue. Any embedder producing fixed-length vectors can be
//! swapped in through [`SpeakerEmbedder`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vad::SpeechSegment;

pub const EMBEDDING_DIM: usize = 26;
/// Segments with fewer frames than this cannot be embedded.
pub const MIN_EMBED_FRAMES: usize = 10;
pub const MIN_ENROLLMENT_PER_SIDE: usize = 3;

const MODEL_MAGIC: [u8; 4] = *b"SPKM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpeakerError {
    #[error("segment has {frames} frames, need at least {MIN_EMBED_FRAMES}")]
    SegmentTooShort { frames: usize },
    #[error("need at least {MIN_ENROLLMENT_PER_SIDE} embeddings per speaker, got {therapist} therapist / {client} client")]
    TooFewExamples { therapist: usize, client: usize },
    #[error("enrollment data is not separable (training accuracy {accuracy:.3}); re-enroll")]
    NotSeparableWell { accuracy: f64 },
    #[error("embedding dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("speaker model file: {0}")]
    ModelFormat(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub v: Vec<f64>,
}

pub trait SpeakerEmbedder {
    fn embed(&self, rows: &[Vec<f64>]) -> Result<SpeakerEmbedding, SpeakerError>;
}

/// Mean and population standard deviation of each MFCC coefficient.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatsPooling;

impl SpeakerEmbedder for StatsPooling {
    fn embed(&self, rows: &[Vec<f64>]) -> Result<SpeakerEmbedding, SpeakerError> {
        embed(rows)
    }
}

pub fn embed(rows: &[Vec<f64>]) -> Result<SpeakerEmbedding, SpeakerError> {
    if rows.len() < MIN_EMBED_FRAMES {
        return Err(SpeakerError::SegmentTooShort { frames: rows.len() });
    }
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; dim];
    for row in rows {
        for ((s, x), m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
    mean[0] = 0.0;
    let mut v = mean;
    v.extend(std);
    Ok(SpeakerEmbedding { v })
}

/// Embeddings of consecutive non-overlapping chunks of `chunk_frames` rows;
/// a trailing partial chunk is dropped.
pub fn chunk_embeddings(rows: &[Vec<f64>], chunk_frames: usize) -> Vec<SpeakerEmbedding> {
    rows.chunks_exact(chunk_frames.max(MIN_EMBED_FRAMES))
        .map(|chunk| embed(chunk).expect("chunk is long enough"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerLabel {
    Therapist,
    Client,
}

impl fmt::Display for SpeakerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpeakerLabel::Therapist => "therapist",
            SpeakerLabel::Client => "client",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTurn {
    pub segment_id: usize,
    pub label: SpeakerLabel,
    pub score: f64,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub c: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_epochs: 10_000,
            tolerance: 1e-6,
        }
    }
}

/// Linear separator on standardized embeddings. Positive decision values
/// mean therapist.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
    train_margin: f64,
}

impl SpeakerModel {
    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn bias(&self) -> f64 {
        self.b
    }

    pub fn train_margin(&self) -> f64 {
        self.train_margin
    }

    pub fn dims(&self) -> usize {
        self.w.len()
    }

    pub fn decision(&self, v: &SpeakerEmbedding) -> f64 {
        self.w
            .iter()
            .zip(&v.v)
            .zip(self.mean.iter().zip(&self.scale))
            .map(|((w, x), (m, s))| w * (x - m) / s)
            .sum::<f64>()
            + self.b
    }

    pub fn classify(&self, v: &SpeakerEmbedding) -> (SpeakerLabel, f64) {
        let d = self.decision(v);
        let label = if d > 0.0 {
            SpeakerLabel::Therapist
        } else {
            SpeakerLabel::Client
        };
        (label, d.abs())
    }

    /// Little-endian: magic `SPKM`, version u32, dims u32, then `dims` f64
    /// each of mean, scale and w, then b and the training margin.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims() as u32).to_le_bytes());
        for v in self.mean.iter().chain(&self.scale).chain(&self.w) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.b.to_le_bytes());
        out.extend_from_slice(&self.train_margin.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SpeakerError> {
        let bad = |m: &str| SpeakerError::ModelFormat(m.to_string());
        if bytes.len() < 12 || bytes[0..4] != MODEL_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != MODEL_VERSION {
            return Err(bad("unsupported version"));
        }
        let dims = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let expected = dims
            .checked_mul(3)
            .and_then(|n| n.checked_add(2))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(12))
            .ok_or_else(|| bad("size overflow"))?;
        if bytes.len() != expected {
            return Err(bad("wrong length"));
        }
        let values: Vec<f64> = bytes[12..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            mean: values[..dims].to_vec(),
            scale: values[dims..2 * dims].to_vec(),
            w: values[2 * dims..3 * dims].to_vec(),
            b: values[3 * dims],
            train_margin: values[3 * dims + 1],
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains the therapist-vs-client separator.
///
/// Embeddings are centered on the overall mean and divided per dimension by
/// the pooled within-speaker standard deviation (scale 1 where that is zero),
/// then a soft-margin hinge-loss SVM with a bias term is solved by dual
/// coordinate descent in a fixed sweep order. The model is only returned if it
/// classifies every enrollment embedding correctly.
pub fn train_speaker_model(
    therapist: &[SpeakerEmbedding],
    client: &[SpeakerEmbedding],
    config: &SvmConfig,
) -> Result<SpeakerModel, SpeakerError> {
    if therapist.len() < MIN_ENROLLMENT_PER_SIDE || client.len() < MIN_ENROLLMENT_PER_SIDE {
        return Err(SpeakerError::TooFewExamples {
            therapist: therapist.len(),
            client: client.len(),
        });
    }
    let dim = therapist[0].v.len();
    if let Some(e) = therapist.iter().chain(client).find(|e| e.v.len() != dim) {
        return Err(SpeakerError::DimensionMismatch {
            expected: dim,
            found: e.v.len(),
        });
    }
    let points: Vec<(&[f64], f64)> = therapist
        .iter()
        .map(|e| (e.v.as_slice(), 1.0))
        .chain(client.iter().map(|e| (e.v.as_slice(), -1.0)))
        .collect();
    let n = points.len() as f64;
    let mut mean = vec![0.0; dim];
    for (x, _) in &points {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    // Scale by the pooled within-speaker spread: dividing by the total
    // spread would shrink exactly the dimensions that tell speakers apart.
    let side_mean = |side: &[SpeakerEmbedding]| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for e in side {
            for (a, v) in m.iter_mut().zip(&e.v) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|a| *a /= side.len() as f64);
        m
    };
    let (t_mean, c_mean) = (side_mean(therapist), side_mean(client));
    let mut scale = vec![0.0; dim];
    for (x, y) in &points {
        let m = if *y > 0.0 { &t_mean } else { &c_mean };
        for ((s, v), m) in scale.iter_mut().zip(x.iter()).zip(m) {
            *s += (v - m) * (v - m);
        }
    }
    scale.iter_mut().for_each(|s| {
        let sd = (*s / n).sqrt();
        *s = if sd > 1e-12 { sd } else { 1.0 };
    });

    // augmented rows [z, 1] so the bias is learned with the weights
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|(x, _)| {
            x.iter()
                .zip(mean.iter().zip(&scale))
                .map(|(v, (m, s))| (v - m) / s)
                .chain(std::iter::once(1.0))
                .collect()
        })
        .collect();
    let labels: Vec<f64> = points.iter().map(|(_, y)| *y).collect();
    let q_diag: Vec<f64> = rows.iter().map(|r| dot(r, r)).collect();
    let mut alpha = vec![0.0; rows.len()];
    let mut w = vec![0.0; dim + 1];
    for _ in 0..config.max_epochs {
        let mut max_pg = f64::NEG_INFINITY;
        let mut min_pg = f64::INFINITY;
        for i in 0..rows.len() {
            let g = labels[i] * dot(&w, &rows[i]) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= config.c {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg);
            min_pg = min_pg.min(pg);
            if pg != 0.0 && q_diag[i] > 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q_diag[i]).clamp(0.0, config.c);
                let step = (alpha[i] - old) * labels[i];
                for (wj, xj) in w.iter_mut().zip(&rows[i]) {
                    *wj += step * xj;
                }
            }
        }
        if max_pg - min_pg < config.tolerance {
            break;
        }
    }
    let b = w[dim];
    w.truncate(dim);

    let norm = dot(&w, &w).sqrt();
    let margins: Vec<f64> = rows
        .iter()
        .zip(&labels)
        .map(|(r, y)| y * (dot(&w, &r[..dim]) + b))
        .collect();
    let correct = margins.iter().filter(|&&m| m > 0.0).count();
    if correct < rows.len() || norm == 0.0 {
        return Err(SpeakerError::NotSeparableWell {
            accuracy: correct as f64 / rows.len() as f64,
        });
    }
    let train_margin = margins.iter().copied().fold(f64::INFINITY, f64::min) / norm;
    Ok(SpeakerModel {
        mean,
        scale,
        w,
        b,
        train_margin,
    })
}

fn interval_gap(a: &SpeechSegment, b: &SpeechSegment) -> f64 {
    (b.start_s - a.end_s).max(a.start_s - b.end_s).max(0.0)
}

/// Labels every segment and partitions them into `(client, therapist)`
/// turns. Segments without an embedding inherit the label of the nearest
/// embedded segment in time (earlier one on ties) with score 0; if no segment
/// has an embedding, everything is client.
pub fn filter_client_segments(
    segments: &[SpeechSegment],
    embeddings: &[Option<SpeakerEmbedding>],
    model: &SpeakerModel,
) -> (Vec<SpeakerTurn>, Vec<SpeakerTurn>) {
    let direct: Vec<Option<(SpeakerLabel, f64)>> = embeddings
        .iter()
        .map(|e| e.as_ref().map(|e| model.classify(e)))
        .collect();
    let turns = segments.iter().enumerate().map(|(i, seg)| {
        let (label, score) = match direct.get(i).copied().flatten() {
            Some(ls) => ls,
            None => {
                let nearest = (0..segments.len())
                    .filter(|&j| direct.get(j).copied().flatten().is_some())
                    .min_by(|&a, &b| {
                        interval_gap(seg, &segments[a])
                            .total_cmp(&interval_gap(seg, &segments[b]))
                            .then(a.cmp(&b))
                    });
                match nearest {
                    Some(j) => (direct[j].expect("filtered").0, 0.0),
                    None => (SpeakerLabel::Client, 0.0),
                }
            }
        };
        SpeakerTurn {
            segment_id: seg.id,
            label,
            score,
            start_s: seg.start_s,
            end_s: seg.end_s,
        }
    });
    turns.partition(|t| t.label == SpeakerLabel::Client)
}

/// Turns for a session without a speaker model: every segment is client.
pub fn all_client(segments: &[SpeechSegment]) -> Vec<SpeakerTurn> {
    segments
        .iter()
        .map(|seg| SpeakerTurn {
            segment_id: seg.id,
            label: SpeakerLabel::Client,
            score: 0.0,
            start_s: seg.start_s,
            end_s: seg.end_s,
        })
        .collect()
}

//! Rule-based markers for potential stutters: prolongations, repetitions
//! and blocks, computed from decoded client phone segments.
//!
//! All thresholds live in [`EventConfig`] so they can be tuned per client.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::phones::{Category, PhoneSegment, PhoneSet};
use crate::speaker::{SpeakerLabel, SpeakerTurn};

/// Slack for comparing times computed along different float paths.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventConfig {
    /// A phone is prolonged at this multiple of its reference median.
    pub prolongation_ratio: f64,
    pub prolongation_min_s: f64,
    /// Score is `duration / (score_ratio * median)`, capped at 1.
    pub prolongation_score_ratio: f64,
    /// Occurrences needed before a phone's own median is used instead of its
    /// category median.
    pub min_occurrences_for_median: usize,
    pub repetition_max_gap_s: f64,
    /// Score is `(k - 1) / score_divisor` for `k` occurrences, capped at 1.
    pub repetition_score_divisor: f64,
    pub block_min_s: f64,
    pub block_max_s: f64,
    /// Score is `duration / block_score_s`, capped at 1.
    pub block_score_s: f64,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self {
            prolongation_ratio: 3.0,
            prolongation_min_s: 0.30,
            prolongation_score_ratio: 6.0,
            min_occurrences_for_median: 3,
            repetition_max_gap_s: 0.15,
            repetition_score_divisor: 3.0,
            block_min_s: 0.5,
            block_max_s: 3.0,
            block_score_s: 2.0,
        }
    }
}

impl EventConfig {
    /// Every absolute time threshold multiplied by `factor`.
    pub fn time_scaled(&self, factor: f64) -> Self {
        Self {
            prolongation_min_s: self.prolongation_min_s * factor,
            repetition_max_gap_s: self.repetition_max_gap_s * factor,
            block_min_s: self.block_min_s * factor,
            block_max_s: self.block_max_s * factor,
            block_score_s: self.block_score_s * factor,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Prolongation,
    Repetition,
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MedianSource {
    Phone,
    Category,
}

/// What triggered an event, for display next to the marker.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Evidence {
    pub phones: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_source: Option<MedianSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StutterEvent {
    pub kind: EventKind,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
    pub evidence: Evidence,
}

/// Median of `values`; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Flags phone occurrences held much longer than that phone's session
/// median (or its category's median when the phone is rare).
pub fn detect_prolongations(
    phones: &[PhoneSegment],
    set: &PhoneSet,
    config: &EventConfig,
) -> Vec<StutterEvent> {
    let speech: Vec<&PhoneSegment> = phones.iter().filter(|p| !p.is_silence()).collect();
    let mut by_phone: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut by_category: BTreeMap<Category, Vec<f64>> = BTreeMap::new();
    for seg in &speech {
        by_phone
            .entry(&seg.phone)
            .or_default()
            .push(seg.duration_s());
        if let Some(cat) = set.category_of_symbol(&seg.phone) {
            by_category.entry(cat).or_default().push(seg.duration_s());
        }
    }
    let reference = |phone: &str| -> Option<(f64, MedianSource)> {
        let own = &by_phone[phone];
        if own.len() >= config.min_occurrences_for_median {
            return median(own).map(|m| (m, MedianSource::Phone));
        }
        match set.category_of_symbol(phone) {
            Some(cat) => median(&by_category[&cat]).map(|m| (m, MedianSource::Category)),
            None => median(own).map(|m| (m, MedianSource::Phone)),
        }
    };
    speech
        .iter()
        .filter_map(|seg| {
            let (med, source) = reference(&seg.phone)?;
            let dur = seg.duration_s();
            if med <= 0.0
                || dur < config.prolongation_ratio * med
                || dur < config.prolongation_min_s
            {
                return None;
            }
            Some(StutterEvent {
                kind: EventKind::Prolongation,
                start_s: seg.start_s,
                end_s: seg.end_s,
                score: (dur / (config.prolongation_score_ratio * med)).min(1.0),
                evidence: Evidence {
                    phones: vec![seg.phone.clone()],
                    duration_s: Some(dur),
                    duration_ratio: Some(dur / med),
                    median_s: Some(med),
                    median_source: Some(source),
                    repetitions: None,
                },
            })
        })
        .collect()
}

/// Whether `phones[at..]` starts with `unit`.
fn unit_at(phones: &[PhoneSegment], at: usize, unit: &[&str]) -> bool {
    at + unit.len() <= phones.len()
        && phones[at..at + unit.len()]
            .iter()
            .zip(unit)
            .all(|(p, u)| p.phone == *u)
}

/// Whether `phones[from..to]` has no time gaps. Client phones from separate
/// regions sit next to each other in the list but not in time.
fn contiguous(phones: &[PhoneSegment], from: usize, to: usize) -> bool {
    phones[from..to]
        .windows(2)
        .all(|w| w[1].start_s <= w[0].end_s + TIME_EPS)
}

/// Index where the next occurrence of `unit` starts after a unit ending at
/// `end` (exclusive), if it follows directly or after one short silence.
fn next_occurrence(
    phones: &[PhoneSegment],
    end: usize,
    unit: &[&str],
    max_gap_s: f64,
) -> Option<usize> {
    let n = unit.len();
    if unit_at(phones, end, unit) && contiguous(phones, end - 1, end + n) {
        return Some(end);
    }
    let gap = phones.get(end)?;
    if gap.is_silence()
        && gap.duration_s() < max_gap_s
        && unit_at(phones, end + 1, unit)
        && contiguous(phones, end - 1, end + 1 + n)
    {
        return Some(end + 1);
    }
    None
}

fn repetitions_of_width(
    phones: &[PhoneSegment],
    width: usize,
    config: &EventConfig,
) -> Vec<StutterEvent> {
    let mut events = Vec::new();
    let mut i = 0;
    while i + width <= phones.len() {
        let window = &phones[i..i + width];
        let distinct = width == 1 || window.windows(2).all(|w| w[0].phone != w[1].phone);
        if window.iter().any(PhoneSegment::is_silence)
            || !distinct
            || !contiguous(phones, i, i + width)
        {
            i += 1;
            continue;
        }
        let unit: Vec<&str> = window.iter().map(|p| p.phone.as_str()).collect();
        let mut count = 1;
        let mut last_start = i;
        while let Some(next) = next_occurrence(
            phones,
            last_start + width,
            &unit,
            config.repetition_max_gap_s,
        ) {
            count += 1;
            last_start = next;
        }
        if count >= 2 {
            let end = last_start + width - 1;
            events.push(StutterEvent {
                kind: EventKind::Repetition,
                start_s: phones[i].start_s,
                end_s: phones[end].end_s,
                score: ((count - 1) as f64 / config.repetition_score_divisor).min(1.0),
                evidence: Evidence {
                    phones: unit.iter().map(|s| s.to_string()).collect(),
                    repetitions: Some(count),
                    ..Evidence::default()
                },
            });
            i = end + 1;
        } else {
            i += 1;
        }
    }
    events
}

/// Finds runs of two or more occurrences of the same phone or phone pair
/// separated only by short silences.
pub fn detect_repetitions(phones: &[PhoneSegment], config: &EventConfig) -> Vec<StutterEvent> {
    let mut events = repetitions_of_width(phones, 1, config);
    events.extend(repetitions_of_width(phones, 2, config));
    events
}

/// Maximal spans of consecutive client turns with no therapist turn in
/// between.
pub fn client_regions(turns: &[SpeakerTurn]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<&SpeakerTurn> = turns.iter().collect();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let mut regions: Vec<(f64, f64)> = Vec::new();
    let mut open = false;
    for turn in sorted {
        match turn.label {
            SpeakerLabel::Client => match regions.last_mut() {
                Some(last) if open => last.1 = last.1.max(turn.end_s),
                _ => {
                    regions.push((turn.start_s, turn.end_s));
                    open = true;
                }
            },
            SpeakerLabel::Therapist => open = false,
        }
    }
    regions
}

/// Flags silences inside a client turn region with speech on both sides.
pub fn detect_blocks(
    phones: &[PhoneSegment],
    turns: &[SpeakerTurn],
    config: &EventConfig,
) -> Vec<StutterEvent> {
    let regions = client_regions(turns);
    phones
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_silence())
        .filter_map(|(i, sil)| {
            let &(r_start, r_end) = regions
                .iter()
                .find(|(s, e)| sil.start_s >= s - TIME_EPS && sil.end_s <= e + TIME_EPS)?;
            let inside = |p: &&PhoneSegment| p.start_s < r_end && p.end_s > r_start;
            let before = phones[..i].iter().filter(inside).any(|p| !p.is_silence());
            let after = phones[i + 1..]
                .iter()
                .filter(inside)
                .any(|p| !p.is_silence());
            let dur = sil.duration_s();
            if !before || !after || dur < config.block_min_s || dur > config.block_max_s {
                return None;
            }
            Some(StutterEvent {
                kind: EventKind::Block,
                start_s: sil.start_s,
                end_s: sil.end_s,
                score: (dur / config.block_score_s).min(1.0),
                evidence: Evidence {
                    phones: vec![sil.phone.clone()],
                    duration_s: Some(dur),
                    ..Evidence::default()
                },
            })
        })
        .collect()
}

/// Sorts events by `(start, kind)` and merges overlapping events of the same
/// kind, keeping the highest score and its evidence.
pub fn merge_events(events: Vec<StutterEvent>) -> Vec<StutterEvent> {
    let mut by_kind: BTreeMap<EventKind, Vec<StutterEvent>> = BTreeMap::new();
    for e in events {
        by_kind.entry(e.kind).or_default().push(e);
    }
    let mut out = Vec::new();
    for (_, mut list) in by_kind {
        list.sort_by(|a, b| {
            a.start_s
                .total_cmp(&b.start_s)
                .then(a.end_s.total_cmp(&b.end_s))
        });
        let mut merged: Vec<StutterEvent> = Vec::with_capacity(list.len());
        for e in list {
            match merged.last_mut() {
                Some(cur) if e.start_s < cur.end_s => {
                    cur.end_s = cur.end_s.max(e.end_s);
                    if e.score > cur.score {
                        cur.score = e.score;
                        cur.evidence = e.evidence;
                    }
                }
                _ => merged.push(e),
            }
        }
        out.extend(merged);
    }
    out.sort_by(|a, b| {
        a.start_s
            .total_cmp(&b.start_s)
            .then(a.kind.cmp(&b.kind))
            .then(a.end_s.total_cmp(&b.end_s))
    });
    out
}

/// Runs every detector on client phones and merges the results.
pub fn detect_all(
    phones: &[PhoneSegment],
    turns: &[SpeakerTurn],
    set: &PhoneSet,
    config: &EventConfig,
) -> Vec<StutterEvent> {
    let mut events = detect_prolongations(phones, set, config);
    events.extend(detect_repetitions(phones, config));
    events.extend(detect_blocks(phones, turns, config));
    merge_events(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(spec: &[(&str, f64)]) -> Vec<PhoneSegment> {
        let mut t = 0.0;
        spec.iter()
            .map(|&(phone, dur)| {
                let seg = PhoneSegment {
                    phone: phone.to_string(),
                    start_s: t,
                    end_s: t + dur,
                    mean_posterior: 1.0,
                };
                t += dur;
                seg
            })
            .collect()
    }

    fn turn(label: SpeakerLabel, start_s: f64, end_s: f64) -> SpeakerTurn {
        SpeakerTurn {
            segment_id: 0,
            label,
            score: 1.0,
            start_s,
            end_s,
        }
    }

    fn event(kind: EventKind, start_s: f64, end_s: f64, score: f64) -> StutterEvent {
        StutterEvent {
            kind,
            start_s,
            end_s,
            score,
            evidence: Evidence::default(),
        }
    }

    #[test]
    fn uniform_durations_flag_nothing() {
        let set = PhoneSet::standard();
        let phones = seq(&[("s", 0.1), ("aa", 0.1), ("t", 0.1), ("s", 0.1), ("aa", 0.1)]);
        assert!(detect_prolongations(&phones, &set, &EventConfig::default()).is_empty());
    }

    #[test]
    fn long_s_is_prolonged() {
        let set = PhoneSet::standard();
        let phones = seq(&[
            ("s", 0.1),
            ("aa", 0.1),
            ("s", 0.1),
            ("aa", 0.1),
            ("s", 0.5),
            ("aa", 0.1),
            ("s", 0.1),
        ]);
        let events = detect_prolongations(&phones, &set, &EventConfig::default());
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!(e.kind, EventKind::Prolongation);
        assert!((e.score - 5.0 / 6.0).abs() < 1e-9);
        assert_eq!(e.evidence.median_source, Some(MedianSource::Phone));
        assert!((e.evidence.duration_ratio.unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn short_absolute_duration_is_not_prolonged() {
        let set = PhoneSet::standard();
        let phones = seq(&[
            ("s", 0.05),
            ("s", 0.05),
            ("aa", 0.1),
            ("s", 0.25),
            ("s", 0.05),
        ]);
        assert!(detect_prolongations(&phones, &set, &EventConfig::default()).is_empty());
    }

    #[test]
    fn repetition_examples() {
        let cfg = EventConfig::default();
        let phones = seq(&[
            ("s", 0.1),
            ("sil", 0.1),
            ("s", 0.1),
            ("sil", 0.1),
            ("s", 0.1),
            ("aa", 0.2),
        ]);
        let events = detect_repetitions(&phones, &cfg);
        assert_eq!(events.len(), 1);
        assert!((events[0].score - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((events[0].start_s, events[0].end_s), (0.0, phones[4].end_s));
        assert_eq!(events[0].evidence.repetitions, Some(3));

        let phones = seq(&[("s", 0.1), ("sil", 0.5), ("s", 0.1)]);
        assert!(detect_repetitions(&phones, &cfg).is_empty());

        let phones = seq(&[
            ("k", 0.1),
            ("aa", 0.1),
            ("sil", 0.1),
            ("k", 0.1),
            ("aa", 0.1),
            ("t", 0.1),
        ]);
        let events = detect_repetitions(&phones, &cfg);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].evidence.phones, ["k", "aa"]);
        assert!((events[0].score - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(events[0].end_s, phones[4].end_s);
    }

    #[test]
    fn block_examples() {
        let cfg = EventConfig::default();
        let phones = seq(&[("aa", 0.3), ("sil", 0.8), ("t", 0.3)]);
        let turns = [turn(SpeakerLabel::Client, 0.0, 1.4)];
        let events = detect_blocks(&phones, &turns, &cfg);
        assert_eq!(events.len(), 1);
        assert!((events[0].score - 0.4).abs() < 1e-12);

        let phones = seq(&[("aa", 0.3), ("sil", 0.3), ("t", 0.3)]);
        let turns = [turn(SpeakerLabel::Client, 0.0, 0.9)];
        assert!(detect_blocks(&phones, &turns, &cfg).is_empty());

        // silence runs to the end of the client turn; the therapist is next
        let phones = seq(&[("aa", 0.3), ("sil", 0.8)]);
        let turns = [
            turn(SpeakerLabel::Client, 0.0, 1.1),
            turn(SpeakerLabel::Therapist, 1.1, 2.0),
        ];
        assert!(detect_blocks(&phones, &turns, &cfg).is_empty());
    }

    #[test]
    fn regions_join_adjacent_client_turns() {
        let turns = [
            turn(SpeakerLabel::Client, 0.0, 1.0),
            turn(SpeakerLabel::Client, 1.6, 2.0),
            turn(SpeakerLabel::Therapist, 2.5, 3.0),
            turn(SpeakerLabel::Client, 3.5, 4.0),
        ];
        assert_eq!(client_regions(&turns), vec![(0.0, 2.0), (3.5, 4.0)]);
    }

    #[test]
    fn merge_examples() {
        assert!(merge_events(vec![]).is_empty());
        let merged = merge_events(vec![
            event(EventKind::Prolongation, 1.0, 2.0, 0.4),
            event(EventKind::Prolongation, 1.5, 2.5, 0.7),
        ]);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].score, 0.7);
        assert_eq!((merged[0].start_s, merged[0].end_s), (1.0, 2.5));

        let merged = merge_events(vec![
            event(EventKind::Block, 1.0, 2.0, 0.5),
            event(EventKind::Prolongation, 1.0, 2.0, 0.4),
        ]);
        assert_eq!(merged.len(), 2);
        assert_eq!(merged[0].kind, EventKind::Prolongation);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}

use proptest::prelude::*;
use rand::Rng;
use stutter_core::audio::AudioClip;
use stutter_core::features::FeatureExtractor;
use stutter_core::vad::{detect_speech, percentile, SpeechSegment, VadConfig};
use stutter_testkit as kit;

const RATE: u32 = 16_000;

fn segments_of(samples: Vec<f64>) -> Vec<SpeechSegment> {
    let features = FeatureExtractor::default().extract(&AudioClip::new(samples, RATE, "v"));
    detect_speech(&features.log_energy, features.hop_s, &VadConfig::default())
}

/// Bursts of tone or noise at 20 dB over a white-noise floor.
fn fixture(seed: u64) -> (Vec<f64>, Vec<(f64, f64)>) {
    let mut rng = kit::rng(seed);
    let noise_sigma = 0.002;
    let mut truth = Vec::new();
    let lead = rng.random_range(0.5..1.5);
    let mut samples = vec![0.0; (lead * RATE as f64) as usize];
    for _ in 0..rng.random_range(1..4) {
        let dur = rng.random_range(0.4..1.5);
        let n = (dur * RATE as f64) as usize;
        // signal power 100x the noise power
        let burst = if rng.random_bool(0.5) {
            let amp = noise_sigma * 10.0 * 2f64.sqrt();
            kit::sine(rng.random_range(100.0..1000.0), RATE, n, amp)
        } else {
            kit::white_noise(&mut rng, n, noise_sigma * 10.0)
        };
        let start = samples.len() as f64 / RATE as f64;
        samples.extend(burst);
        truth.push((start, samples.len() as f64 / RATE as f64));
        let gap = rng.random_range(0.5..1.5);
        samples.resize(samples.len() + (gap * RATE as f64) as usize, 0.0);
    }
    samples.resize(samples.len() + RATE as usize * 3, 0.0);
    let noise = kit::white_noise(&mut rng, samples.len(), noise_sigma);
    for (s, n) in samples.iter_mut().zip(noise) {
        *s += n;
    }
    (samples, truth)
}

#[test]
fn silence_yields_no_segments() {
    assert!(segments_of(vec![0.0; 3 * RATE as usize]).is_empty());
    let dither = kit::white_noise(&mut kit::rng(1), 3 * RATE as usize, 1e-4);
    assert!(segments_of(dither).is_empty());
}

#[test]
fn tone_in_dither_is_localized() {
    let mut x = kit::white_noise(&mut kit::rng(2), 3 * RATE as usize, 1e-4);
    let tone = kit::sine(300.0, RATE, RATE as usize, 0.1);
    for (i, v) in tone.into_iter().enumerate() {
        x[RATE as usize + i] += v;
    }
    let segs = segments_of(x);
    assert_eq!(segs.len(), 1);
    assert!((segs[0].start_s - 1.0).abs() <= 0.05);
    assert!((segs[0].end_s - 2.0).abs() <= 0.05);
}

#[test]
fn boundaries_within_50_ms_at_20_db_snr() {
    for seed in 0..40 {
        let (samples, truth) = fixture(seed);
        let segs = segments_of(samples);
        assert_eq!(
            segs.len(),
            truth.len(),
            "seed {seed}: {segs:?} vs {truth:?}"
        );
        for (seg, (start, end)) in segs.iter().zip(&truth) {
            assert!(
                (seg.start_s - start).abs() <= 0.05 && (seg.end_s - end).abs() <= 0.05,
                "seed {seed}: {seg:?} vs ({start}, {end})"
            );
        }
    }
}

#[test]
fn short_gap_is_closed() {
    let mut x = kit::white_noise(&mut kit::rng(3), 3 * RATE as usize, 1e-4);
    let burst = kit::sine(200.0, RATE, RATE as usize / 2, 0.2);
    for (offset, v) in burst.iter().enumerate() {
        x[RATE as usize + offset] += v;
        x[RATE as usize * 16 / 10 + offset] += v;
    }
    assert_eq!(segments_of(x).len(), 1);
}

#[test]
fn gain_never_removes_a_segment() {
    for seed in 100..120 {
        let (samples, _) = fixture(seed);
        let base = segments_of(samples.clone());
        for gain in [1.5, 4.0, 10.0] {
            let louder = segments_of(samples.iter().map(|s| s * gain).collect());
            for seg in &base {
                assert!(
                    louder
                        .iter()
                        .any(|l| l.start_s < seg.end_s && seg.start_s < l.end_s),
                    "seed {seed} gain {gain}: lost {seg:?}"
                );
            }
        }
    }
}

fn energy_track() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            3 => -23.0f64..-15.0,
            2 => -8.0f64..2.0,
        ],
        1..600,
    )
    .prop_flat_map(|base| {
        // smear into runs so segments of realistic length appear
        let n = base.len();
        (Just(base), prop::collection::vec(1usize..40, n))
    })
    .prop_map(|(base, lens)| {
        base.into_iter()
            .zip(lens)
            .flat_map(|(v, k)| std::iter::repeat_n(v, k))
            .take(3000)
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn segments_obey_gap_and_duration_rules(track in energy_track()) {
        let cfg = VadConfig::default();
        let hop = 0.01;
        let segs = detect_speech(&track, hop, &cfg);
        let threshold = percentile(&track, cfg.floor_percentile) + cfg.margin;
        let gap_frames = 20;
        for (i, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.id, i);
            prop_assert!(s.start_s < s.end_s);
            prop_assert!(s.end_frame - s.start_frame >= 25);
            prop_assert!(s.duration_s() >= 0.25 - 1e-9);
            prop_assert!(track[s.start_frame] > threshold);
            prop_assert!(track[s.end_frame - 1] > threshold);
            if i > 0 {
                prop_assert!(s.start_frame >= segs[i - 1].end_frame + gap_frames);
            }
        }
        // speech frames left out must be too far from any kept segment to
        // have been joined to it
        for (k, &e) in track.iter().enumerate() {
            if e <= threshold || segs.iter().any(|s| s.frames().contains(&k)) {
                continue;
            }
            for s in &segs {
                let dist = if k < s.start_frame { s.start_frame - k - 1 } else { k - s.end_frame };
                prop_assert!(dist >= gap_frames);
            }
        }
    }
}

use std::sync::Arc;

use rand::Rng;
use stutter_core::audio::AudioClip;
use stutter_core::phones::{PhoneSet, UniformModel};
use stutter_core::speaker::{
    chunk_embeddings, embed, filter_client_segments, train_speaker_model, SpeakerEmbedding,
    SpeakerError, SpeakerLabel, SpeakerModel, SvmConfig, EMBEDDING_DIM,
};
use stutter_core::vad::SpeechSegment;
use stutter_core::{Enrollment, Pipeline, PipelineConfig};
use stutter_testkit as kit;

const DIM: usize = 13;

fn cluster(rng: &mut impl Rng, center: &[f64], sigma: f64, n: usize) -> Vec<SpeakerEmbedding> {
    (0..n)
        .map(|_| SpeakerEmbedding {
            v: kit::gaussian_vec(rng, center, sigma),
        })
        .collect()
}

fn vs(e: &[SpeakerEmbedding]) -> Vec<Vec<f64>> {
    e.iter().map(|e| e.v.clone()).collect()
}

fn all_correct(
    model: &SpeakerModel,
    therapist: &[SpeakerEmbedding],
    client: &[SpeakerEmbedding],
) -> bool {
    therapist
        .iter()
        .all(|e| model.classify(e).0 == SpeakerLabel::Therapist)
        && client
            .iter()
            .all(|e| model.classify(e).0 == SpeakerLabel::Client)
}

#[test]
fn unit_clusters_train_perfectly() {
    let mut rng = kit::rng(1);
    let t = cluster(&mut rng, &[1.0; EMBEDDING_DIM], 0.01, 20);
    let c = cluster(&mut rng, &[-1.0; EMBEDDING_DIM], 0.01, 20);
    assert!(kit::perceptron(&vs(&t), &vs(&c), 1000).is_some());
    let model = train_speaker_model(&t, &c, &SvmConfig::default()).unwrap();
    assert!(all_correct(&model, &t, &c));
    assert!(model.train_margin() > 0.0);
}

#[test]
fn identical_sides_are_rejected() {
    let mut rng = kit::rng(2);
    let t = cluster(&mut rng, &[0.0; EMBEDDING_DIM], 1.0, 10);
    assert!(kit::perceptron(&vs(&t), &vs(&t), 1000).is_none());
    assert!(matches!(
        train_speaker_model(&t, &t, &SvmConfig::default()),
        Err(SpeakerError::NotSeparableWell { .. })
    ));
}

#[test]
fn far_outlier_on_therapist_side_is_tolerated() {
    let mut rng = kit::rng(3);
    let sep = 10.0 / (EMBEDDING_DIM as f64).sqrt();
    let mut t = cluster(&mut rng, &[sep / 2.0; EMBEDDING_DIM], 1.0, 20);
    let c = cluster(&mut rng, &[-sep / 2.0; EMBEDDING_DIM], 1.0, 20);
    // far from both clusters, along a direction orthogonal to the separation
    let mut outlier = vec![sep / 2.0; EMBEDDING_DIM];
    for (i, v) in outlier.iter_mut().enumerate() {
        *v += if i % 2 == 0 { 40.0 } else { -40.0 };
    }
    t.push(SpeakerEmbedding { v: outlier });
    assert!(kit::perceptron(&vs(&t), &vs(&c), 10_000).is_some());
    let model = train_speaker_model(&t, &c, &SvmConfig::default()).unwrap();
    assert!(all_correct(&model, &t, &c));
}

#[test]
fn five_sigma_feature_clusters_give_separable_embeddings() {
    let mut rng = kit::rng(4);
    let dir: Vec<f64> = kit::gaussian_vec(&mut rng, &[0.0; DIM], 1.0);
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let b: Vec<f64> = dir.iter().map(|d| 5.0 * d / norm).collect();
    let mut rows = |m: &[f64]| -> Vec<Vec<f64>> {
        (0..400)
            .map(|_| kit::gaussian_vec(&mut rng, m, 1.0))
            .collect()
    };
    let ea = chunk_embeddings(&rows(&[0.0; DIM]), 20);
    let eb = chunk_embeddings(&rows(&b), 20);
    assert_eq!(ea.len(), 20);
    assert!(kit::perceptron(&vs(&ea), &vs(&eb), 10_000).is_some());
}

#[test]
fn embedding_ignores_frame_order() {
    let mut rng = kit::rng(5);
    let mut rows: Vec<Vec<f64>> = (0..50)
        .map(|_| kit::gaussian_vec(&mut rng, &[0.0; DIM], 1.0))
        .collect();
    let a = embed(&rows).unwrap();
    rows.reverse();
    rows.swap(3, 17);
    let b = embed(&rows).unwrap();
    for (x, y) in a.v.iter().zip(&b.v) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(matches!(
        embed(&rows[..9]),
        Err(SpeakerError::SegmentTooShort { frames: 9 })
    ));
}

fn seg(id: usize, start_frame: usize, end_frame: usize) -> SpeechSegment {
    SpeechSegment {
        id,
        start_s: start_frame as f64 * 0.01,
        end_s: end_frame as f64 * 0.01,
        mean_log_energy: 0.0,
        start_frame,
        end_frame,
    }
}

#[test]
fn ten_sigma_session_is_partitioned_exactly() {
    let mut rng = kit::rng(6);
    let t_mean = [0.0; DIM];
    let mut c_mean = [0.0; DIM];
    c_mean[1] = 10.0;
    let mut frames = |m: &[f64], n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| kit::gaussian_vec(&mut rng, m, 1.0))
            .collect()
    };
    let t_enroll = chunk_embeddings(&frames(&t_mean, 500), 100);
    let c_enroll = chunk_embeddings(&frames(&c_mean, 500), 100);
    let model = train_speaker_model(&t_enroll, &c_enroll, &SvmConfig::default()).unwrap();

    let mut segments = Vec::new();
    let mut embeddings = Vec::new();
    let mut truth = Vec::new();
    let mut k = 0;
    for i in 0..40 {
        let therapist = (i * 7) % 3 == 0;
        let len = 30 + (i * 13) % 70;
        segments.push(seg(i, k, k + len));
        let rows = frames(if therapist { &t_mean } else { &c_mean }, len);
        embeddings.push(Some(embed(&rows).unwrap()));
        truth.push(if therapist {
            SpeakerLabel::Therapist
        } else {
            SpeakerLabel::Client
        });
        k += len + 30;
    }
    let (client, therapist) = filter_client_segments(&segments, &embeddings, &model);
    assert_eq!(client.len() + therapist.len(), segments.len());
    for turn in client.iter().chain(&therapist) {
        assert_eq!(turn.label, truth[turn.segment_id]);
    }
}

#[test]
fn unembeddable_segment_inherits_nearest_label() {
    let mut rng = kit::rng(7);
    let t = cluster(&mut rng, &[1.0; EMBEDDING_DIM], 0.01, 5);
    let c = cluster(&mut rng, &[-1.0; EMBEDDING_DIM], 0.01, 5);
    let model = train_speaker_model(&t, &c, &SvmConfig::default()).unwrap();
    let segments = [seg(0, 0, 50), seg(1, 60, 65), seg(2, 200, 260)];
    let embeddings = [Some(t[0].clone()), None, Some(c[0].clone())];
    let (client, therapist) = filter_client_segments(&segments, &embeddings, &model);
    assert_eq!(client.len(), 1);
    assert_eq!(therapist.len(), 2);
    let inherited = therapist.iter().find(|t| t.segment_id == 1).unwrap();
    assert_eq!(inherited.score, 0.0);
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let mut rng = kit::rng(8);
    let t = cluster(&mut rng, &[0.5; EMBEDDING_DIM], 0.3, 12);
    let c = cluster(&mut rng, &[-0.5; EMBEDDING_DIM], 0.3, 12);
    let a = train_speaker_model(&t, &c, &SvmConfig::default()).unwrap();
    let b = train_speaker_model(&t, &c, &SvmConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(SpeakerModel::from_bytes(&a.to_bytes()).unwrap(), a);
}

fn pipeline() -> Pipeline {
    let set = PhoneSet::standard();
    let model = Arc::new(UniformModel {
        input_dim: 13,
        n_phones: set.len(),
    });
    Pipeline::new(PipelineConfig::default(), model, set).unwrap()
}

#[test]
fn labels_survive_waveform_gain() {
    let p = pipeline();
    let therapist = AudioClip::new(
        kit::voice_clip(kit::Voice::Therapist, 6.0, 16_000, 1),
        16_000,
        "t",
    );
    let client = AudioClip::new(
        kit::voice_clip(kit::Voice::Client, 4.0, 16_000, 2),
        16_000,
        "c",
    );
    let enrollment = Enrollment {
        therapist: Some(p.enroll(&therapist, SpeakerLabel::Therapist).unwrap()),
        client: Some(p.enroll(&client, SpeakerLabel::Client).unwrap()),
    };
    let session = kit::thirty_second_session(3);
    let clip = AudioClip::new(session.samples, 16_000, "s");
    let base = p.run(&clip, &enrollment, &mut |_| {}).unwrap().bundle;
    let labels =
        |b: &stutter_core::AnalysisBundle| b.turns.iter().map(|t| t.label).collect::<Vec<_>>();
    assert!(labels(&base).contains(&SpeakerLabel::Therapist));
    assert!(labels(&base).contains(&SpeakerLabel::Client));
    let peak = clip.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for gain in [0.1, 0.5, 0.99 / peak] {
        let scaled = p
            .run(&clip.scaled(gain), &enrollment, &mut |_| {})
            .unwrap()
            .bundle;
        assert_eq!(labels(&scaled), labels(&base), "gain {gain}");
    }
}

#[test]
fn synthetic_voices_are_separated_against_ground_truth() {
    let p = pipeline();
    let therapist = AudioClip::new(
        kit::voice_clip(kit::Voice::Therapist, 6.0, 16_000, 4),
        16_000,
        "t",
    );
    let enrollment = Enrollment {
        therapist: Some(p.enroll(&therapist, SpeakerLabel::Therapist).unwrap()),
        client: None,
    };
    let session = kit::thirty_second_session(5);
    let clip = AudioClip::new(session.samples.clone(), 16_000, "s");
    let bundle = p.run(&clip, &enrollment, &mut |_| {}).unwrap().bundle;
    assert!(!bundle.turns.is_empty());
    for turn in &bundle.turns {
        let mid = 0.5 * (turn.start_s + turn.end_s);
        let truth = session
            .turns
            .iter()
            .find(|t| t.start_s - 0.05 <= mid && mid <= t.end_s + 0.05)
            .expect("detected speech lies in a ground-truth turn");
        let want = match truth.what {
            kit::Voice::Therapist => SpeakerLabel::Therapist,
            kit::Voice::Client => SpeakerLabel::Client,
        };
        assert_eq!(turn.label, want, "{turn:?}");
    }
}

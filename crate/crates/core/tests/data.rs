use std::fs;

use proptest::prelude::*;
use seqcrf::crf::LabelSet;
use seqcrf::data::{
    check_split, cross_corpus_split, generate_synthetic_corpus, load_corpus, prototypes, save_corpus,
    subject_independent_folds, Corpus, FrameRecord, Image, LabeledSequence, SequenceStyle, SynthConfig,
};
use seqcrf::Error;

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        num_subjects: 4,
        sequences_per_subject: 2,
        image_size: 8,
        seed,
        ..SynthConfig::default()
    }
}

fn sequence(id: &str, subject: &str, labels: &[usize]) -> LabeledSequence {
    LabeledSequence {
        sequence_id: id.into(),
        subject_id: subject.into(),
        frames: labels
            .iter()
            .enumerate()
            .map(|(t, &label)| FrameRecord {
                image: Image::new(2, 2, 1, vec![0.25 * t as f64 % 1.0; 4]).unwrap(),
                label,
                frame_index: t,
            })
            .collect(),
    }
}

fn corpus_with_subjects(subjects: usize, per_subject: usize) -> Corpus {
    let seqs = (0..subjects)
        .flat_map(|s| (0..per_subject).map(move |q| sequence(&format!("s{s}-q{q}"), &format!("s{s}"), &[0, 1])))
        .collect();
    Corpus::new("c", LabelSet::new(["neutral", "happy"]).unwrap(), seqs).unwrap()
}

#[test]
fn save_then_load_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    for channels in [1, 3] {
        let corpus = generate_synthetic_corpus(&SynthConfig {
            channels,
            ..small_synth(3)
        })
        .unwrap();
        let sub = dir.path().join(format!("c{channels}"));
        let manifest = save_corpus(&corpus, &sub).unwrap();
        let loaded = load_corpus(&manifest).unwrap();
        assert_eq!(loaded.name, corpus.name);
        assert_eq!(loaded.label_set, corpus.label_set);
        assert_eq!(loaded.sequences.len(), corpus.sequences.len());
        for (a, b) in loaded.sequences.iter().zip(&corpus.sequences) {
            assert_eq!(a.sequence_id, b.sequence_id);
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.labels(), b.labels());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert_eq!(fa.frame_index, fb.frame_index);
                // 16-bit quantization.
                for (x, y) in fa.image.data().iter().zip(fb.image.data()) {
                    assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
                }
            }
        }
        // A second round trip is exact.
        let again = load_corpus(&save_corpus(&loaded, &dir.path().join(format!("d{channels}"))).unwrap()).unwrap();
        assert_eq!(again, loaded);
    }
}

#[test]
fn two_frame_manifest_loads() {
    let corpus = Corpus::new(
        "one",
        LabelSet::new(["neutral", "happy"]).unwrap(),
        vec![sequence("a", "s", &[0, 1])],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let loaded = load_corpus(&save_corpus(&corpus, dir.path()).unwrap()).unwrap();
    assert_eq!(loaded.sequences[0].len(), 2);
    assert!(loaded.sequences[0]
        .frames
        .iter()
        .all(|f| f.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

fn write_manifest(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let corpus = Corpus::new(
        "x",
        LabelSet::new(["neutral", "happy"]).unwrap(),
        vec![sequence("a", "s", &[0, 1])],
    )
    .unwrap();
    save_corpus(&corpus, dir).unwrap();
    let path = dir.join("manifest.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn manifest_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let head = r#"{"format_version": 1, "name": "x", "labels": ["neutral", "happy"], "sequences": "#;
    let f0 = r#"{"image_path": "frames/s00000_f00000.png", "label_index": 0}"#;
    let f1 = r#"{"image_path": "frames/s00000_f00001.png", "label_index": 1}"#;
    let case = |seqs: String| load_corpus(&write_manifest(dir.path(), &format!("{head}{seqs}}}"))).unwrap_err();

    assert!(matches!(case("[]".into()), Error::EmptyCorpus));
    let missing = r#"{"image_path": "frames/nope.png", "label_index": 0}"#;
    assert!(matches!(
        case(format!(
            r#"[{{"sequence_id": "a", "subject_id": "s", "frames": [{missing}]}}]"#
        )),
        Error::MissingFile(_)
    ));
    let bad_label = r#"{"image_path": "frames/s00000_f00000.png", "label_index": 5}"#;
    assert!(matches!(
        case(format!(
            r#"[{{"sequence_id": "a", "subject_id": "s", "frames": [{bad_label}]}}]"#
        )),
        Error::LabelOutOfRange { label: 5, .. }
    ));
    assert!(matches!(
        case(format!(
            r#"[{{"sequence_id": "a", "subject_id": "s", "frames": [{f0}]}}, {{"sequence_id": "a", "subject_id": "t", "frames": [{f1}]}}]"#
        )),
        Error::DuplicateSequenceId(_)
    ));
    let late = r#"{"image_path": "frames/s00000_f00000.png", "label_index": 0, "frame_index": 4}"#;
    let early = r#"{"image_path": "frames/s00000_f00001.png", "label_index": 1, "frame_index": 2}"#;
    assert!(matches!(
        case(format!(
            r#"[{{"sequence_id": "a", "subject_id": "s", "frames": [{late}, {early}]}}]"#
        )),
        Error::NonMonotoneFrames(_)
    ));
    let wrong_version = write_manifest(
        dir.path(),
        r#"{"format_version": 9, "name": "x", "labels": ["a", "b"], "sequences": []}"#,
    );
    assert!(load_corpus(&wrong_version).is_err());
    assert!(matches!(
        load_corpus(&dir.path().join("absent.json")).unwrap_err(),
        Error::MissingFile(_)
    ));
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = generate_synthetic_corpus(&small_synth(11)).unwrap();
    let b = generate_synthetic_corpus(&small_synth(11)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_synthetic_corpus(&small_synth(12)).unwrap());
}

#[test]
fn instant_apex_labels_only_the_neutral_lead() {
    let cfg = SynthConfig {
        transition_frames: 0,
        style: SequenceStyle::Onset,
        ..small_synth(2)
    };
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    for s in &corpus.sequences {
        let labels = s.labels().0;
        let class = *labels.iter().max().unwrap();
        assert!(class >= 1);
        let lead = labels.iter().take_while(|&&l| l == 0).count();
        assert!((cfg.neutral_frames.0..=cfg.neutral_frames.1).contains(&lead));
        assert!(labels[lead..].iter().all(|&l| l == class));
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn noiseless_apex_frames_are_nearest_to_their_prototype() {
    // Without ramps every class-labeled frame is an apex frame.
    let cfg = SynthConfig {
        apex_noise: 0.0,
        transition_frames: 0,
        num_subjects: 10,
        seed: 4,
        ..SynthConfig::default()
    };
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let protos = prototypes(&cfg);
    let (mut apex, mut correct) = (0, 0);
    for s in &corpus.sequences {
        let class = s.labels().0.into_iter().max().unwrap();
        for f in s.frames.iter().filter(|f| f.label == class) {
            let x = f.image.data();
            let nearest = (0..protos.len())
                .min_by(|&i, &j| squared_distance(x, &protos[i]).total_cmp(&squared_distance(x, &protos[j])))
                .unwrap();
            apex += 1;
            correct += usize::from(nearest == class);
        }
    }
    assert!(apex > 100);
    assert_eq!(correct, apex);
}

#[test]
fn noiseless_blend_coefficient_determines_the_label() {
    let cfg = SynthConfig {
        apex_noise: 0.0,
        subject_bias: 0.0,
        num_subjects: 5,
        seed: 9,
        ..SynthConfig::default()
    };
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let protos = prototypes(&cfg);
    for s in &corpus.sequences {
        let class = s.labels().0.into_iter().max().unwrap();
        let diff: Vec<f64> = protos[class].iter().zip(&protos[0]).map(|(c, n)| c - n).collect();
        let norm2: f64 = diff.iter().map(|d| d * d).sum();
        for f in &s.frames {
            // Least-squares alpha of x = P0 + alpha (Pc - P0).
            let alpha: f64 = f
                .image
                .data()
                .iter()
                .zip(&protos[0])
                .zip(&diff)
                .map(|((x, p), d)| (x - p) * d)
                .sum::<f64>()
                / norm2;
            assert!((alpha >= 0.5) == (f.label == class), "alpha {alpha} label {}", f.label);
        }
    }
}

#[test]
fn five_folds_over_ten_subjects_test_each_subject_once() {
    let corpus = corpus_with_subjects(10, 3);
    let plan = subject_independent_folds(&corpus, 5, 42).unwrap();
    assert_eq!(plan.folds.len(), 5);
    check_split(&corpus, &plan).unwrap();
    let mut tested: Vec<String> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
    tested.sort();
    let mut all: Vec<String> = corpus.sequences.iter().map(|s| s.sequence_id.clone()).collect();
    all.sort();
    assert_eq!(tested, all);
    assert!(plan.folds.iter().all(|f| !f.validation.is_empty()));
    assert_eq!(plan, subject_independent_folds(&corpus, 5, 42).unwrap());
}

#[test]
fn single_fold_holds_out_subjects() {
    let corpus = corpus_with_subjects(4, 2);
    let plan = subject_independent_folds(&corpus, 1, 0).unwrap();
    assert_eq!(plan.folds.len(), 1);
    check_split(&corpus, &plan).unwrap();
    assert!(!plan.folds[0].test.is_empty() && !plan.folds[0].train.is_empty());
}

#[test]
fn too_few_subjects_is_an_error() {
    let corpus = corpus_with_subjects(3, 2);
    assert!(matches!(
        subject_independent_folds(&corpus, 5, 0).unwrap_err(),
        Error::TooFewSubjects { subjects: 3, folds: 5 }
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn folds_are_subject_disjoint(
        per_subject in prop::collection::vec(1usize..4, 2..15), k in 1usize..6, seed in any::<u64>()
    ) {
        let seqs = per_subject
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| (0..n).map(move |q| sequence(&format!("s{s}-q{q}"), &format!("s{s}"), &[0])))
            .collect();
        let corpus = Corpus::new("p", LabelSet::new(["a", "b"]).unwrap(), seqs).unwrap();
        match subject_independent_folds(&corpus, k, seed) {
            Ok(plan) => {
                prop_assert_eq!(plan.folds.len(), k);
                prop_assert!(check_split(&corpus, &plan).is_ok());
            }
            Err(Error::TooFewSubjects { .. }) => prop_assert!(per_subject.len() < k.max(2)),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[test]
fn identical_label_sets_train_on_the_other_corpus() {
    let labels = LabelSet::new(["neutral", "happy"]).unwrap();
    let a = Corpus::new(
        "a",
        labels.clone(),
        vec![sequence("x", "s", &[0, 1]), sequence("y", "s", &[1])],
    )
    .unwrap();
    let b = Corpus::new("b", labels.clone(), vec![sequence("z", "t", &[0])]).unwrap();
    let split = cross_corpus_split(&[a.clone(), b], "b").unwrap();
    assert_eq!(split.train.sequences.len(), a.sequences.len());
    assert_eq!(split.train.name, "a");
    assert_eq!(split.shared, labels);
    assert_eq!(split.train.sequences[0].labels(), a.sequences[0].labels());
    assert_eq!((split.dropped_train_sequences, split.dropped_test_sequences), (0, 0));
}

#[test]
fn label_sets_are_intersected_by_name() {
    let a = Corpus::new(
        "a",
        LabelSet::new(["neutral", "anger", "happy"]).unwrap(),
        vec![
            sequence("a1", "s", &[0, 1]),
            sequence("a2", "s", &[0, 2, 2]),
            sequence("a3", "t", &[0]),
        ],
    )
    .unwrap();
    let b = Corpus::new(
        "b",
        LabelSet::new(["neutral", "happy", "fear"]).unwrap(),
        vec![
            sequence("b1", "u", &[0, 1]),
            sequence("b2", "u", &[2]),
            sequence("b3", "v", &[0, 2]),
        ],
    )
    .unwrap();
    let split = cross_corpus_split(&[a, b], "b").unwrap();
    assert_eq!(split.shared.names(), ["neutral", "happy"]);
    let ids: Vec<&str> = split.train.sequences.iter().map(|s| s.sequence_id.as_str()).collect();
    assert_eq!(ids, ["a/a2", "a/a3"]);
    assert_eq!(split.train.sequences[0].labels().0, vec![0, 1, 1]);
    assert_eq!(split.dropped_train_sequences, 1);
    let test_ids: Vec<&str> = split.test.sequences.iter().map(|s| s.sequence_id.as_str()).collect();
    assert_eq!(test_ids, ["b1"]);
    assert_eq!(split.dropped_test_sequences, 2);
}

#[test]
fn cross_corpus_errors() {
    let a = Corpus::new(
        "a",
        LabelSet::new(["neutral", "anger"]).unwrap(),
        vec![sequence("x", "s", &[0])],
    )
    .unwrap();
    let b = Corpus::new(
        "b",
        LabelSet::new(["calm", "fear"]).unwrap(),
        vec![sequence("y", "t", &[0])],
    )
    .unwrap();
    assert!(matches!(
        cross_corpus_split(&[a.clone(), b.clone()], "c").unwrap_err(),
        Error::UnknownCorpus(_)
    ));
    assert!(matches!(
        cross_corpus_split(&[a, b], "b").unwrap_err(),
        Error::NoSharedLabels
    ));
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqcrf::crf::{argmax_first, CrfModel, LabelSet};
use seqcrf::data::{generate_synthetic_corpus, Corpus, FrameRecord, Image, LabeledSequence, SynthConfig};
use seqcrf::extractor::{ExtractorConfig, ExtractorModel, FeatureTap, SgdConfig, Tensor};
use seqcrf::pipeline::{predict_frames_softmax, train_two_step, Provenance, TrainedPipeline, TwoStepConfig};
use seqcrf::Error;

fn quick_config() -> TwoStepConfig {
    let mut cfg = TwoStepConfig {
        extractor: ExtractorConfig::tiny(2),
        sgd: SgdConfig {
            total_iterations: 20,
            batch_size: 8,
            lr_drop_every: 10,
            ..SgdConfig::default()
        },
        seed: 3,
        ..TwoStepConfig::default()
    };
    cfg.extractor.feature_dim = 8;
    cfg.crf.optim.max_iterations = 60;
    cfg
}

fn small_corpus(seed: u64) -> Corpus {
    generate_synthetic_corpus(&SynthConfig {
        num_subjects: 3,
        sequences_per_subject: 2,
        num_classes: 3,
        image_size: 8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn random_frames(rng: &mut ChaCha8Rng, t: usize) -> Tensor {
    Tensor::new(
        vec![t, 8, 8, 1],
        (0..t * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn two_step_training_is_deterministic_with_monotone_crf_trace() {
    let corpus = small_corpus(1);
    let (a, report) = train_two_step(&corpus, &quick_config()).unwrap();
    let (b, _) = train_two_step(&corpus, &quick_config()).unwrap();
    assert_eq!(a.extractor().params(), b.extractor().params());
    assert_eq!(a.extractor().buffers(), b.extractor().buffers());
    assert_eq!(a.crf().params(), b.crf().params());
    assert_eq!(a.provenance(), b.provenance());
    for w in report.crf.objective_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    assert_eq!(report.extractor_losses.len(), 20);
    assert_eq!(report.train_frames, corpus.num_frames());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frames = random_frames(&mut rng, 7);
    let labels = a.predict_sequence(&frames).unwrap();
    assert_eq!(labels, b.predict_sequence(&frames).unwrap());
    assert_eq!(labels.len(), 7);
    assert!(labels.0.iter().all(|&y| y < 3));
}

#[test]
fn single_frame_corpus_trains() {
    let corpus = Corpus::new(
        "one",
        LabelSet::new(["neutral", "happy"]).unwrap(),
        vec![LabeledSequence {
            sequence_id: "a".into(),
            subject_id: "s".into(),
            frames: vec![FrameRecord {
                image: Image::new(8, 8, 1, vec![0.5; 64]).unwrap(),
                label: 1,
                frame_index: 0,
            }],
        }],
    )
    .unwrap();
    let (p, _) = train_two_step(&corpus, &quick_config()).unwrap();
    let frames = p.frames_of(&corpus.sequences[0]).unwrap();
    assert_eq!(p.predict_sequence(&frames).unwrap().len(), 1);
}

#[test]
fn single_frame_prediction_maximizes_the_state_score() {
    let (p, _) = train_two_step(&small_corpus(2), &quick_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let frames = random_frames(&mut rng, 1);
        let obs = p.features(&frames).unwrap();
        let scores = p.crf().state_scores(&obs);
        assert_eq!(p.predict_sequence(&frames).unwrap().0, vec![argmax_first(&scores)]);
    }
}

fn identity_logits_pipeline(extractor: ExtractorModel) -> TrainedPipeline {
    let k = extractor.num_classes();
    let labels = LabelSet::new((0..k).map(|i| format!("c{i}"))).unwrap();
    let mut params = vec![0.0; CrfModel::param_count(k, k)];
    for y in 0..k {
        params[y * k + y] = 1.0;
    }
    let crf = CrfModel::from_params(labels, k, params).unwrap();
    let provenance = Provenance {
        config_hash: String::new(),
        seed: 0,
    };
    TrainedPipeline::new(extractor, crf, FeatureTap::Logits, None, provenance).unwrap()
}

#[test]
fn zero_transitions_on_logits_match_softmax_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in [2, 3, 5] {
        let mut cfg = ExtractorConfig::tiny(k);
        cfg.seed = rng.random();
        let p = identity_logits_pipeline(ExtractorModel::new(cfg).unwrap());
        for _ in 0..5 {
            let t = rng.random_range(1..=9);
            let frames = random_frames(&mut rng, t);
            assert_eq!(
                p.predict_sequence(&frames).unwrap(),
                p.predict_frames_softmax(&frames).unwrap()
            );
        }
    }
}

#[test]
fn zeroed_output_layer_labels_everything_zero() {
    let mut model = ExtractorModel::new(ExtractorConfig::tiny(4)).unwrap();
    model.zero_output_layer();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames = random_frames(&mut rng, 6);
    assert_eq!(predict_frames_softmax(&model, &frames).unwrap().0, vec![0; 6]);
}

#[test]
fn duplicated_frames_get_duplicated_labels() {
    let model = ExtractorModel::new(ExtractorConfig::tiny(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = random_frames(&mut rng, 3);
    let doubled: Vec<f64> = frames.data().iter().chain(frames.data()).copied().collect();
    let doubled = Tensor::new(vec![6, 8, 8, 1], doubled).unwrap();
    let once = predict_frames_softmax(&model, &frames).unwrap().0;
    let twice = predict_frames_softmax(&model, &doubled).unwrap().0;
    assert_eq!(twice[..3], once[..]);
    assert_eq!(twice[3..], once[..]);
}

#[test]
fn mismatched_crf_width_is_rejected() {
    let extractor = ExtractorModel::new(ExtractorConfig::tiny(2)).unwrap();
    let crf = CrfModel::zeros(LabelSet::new(["a", "b"]).unwrap(), 3).unwrap();
    let provenance = Provenance {
        config_hash: String::new(),
        seed: 0,
    };
    let err = TrainedPipeline::new(extractor, crf, FeatureTap::Penultimate, None, provenance).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch(_)));
}

#[test]
fn standardized_features_train() {
    let mut cfg = quick_config();
    cfg.standardize_features = true;
    let (p, _) = train_two_step(&small_corpus(5), &cfg).unwrap();
    let s = p.scaler().unwrap();
    assert_eq!(s.mean.len(), 8);
    assert!(s.inv_std.iter().all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn invalid_learning_rate_is_rejected() {
    let mut cfg = quick_config();
    cfg.sgd.base_lr = f64::NAN;
    assert!(matches!(
        train_two_step(&small_corpus(5), &cfg).unwrap_err().root(),
        Error::InvalidConfig(_)
    ));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = quick_config();
    let text = cfg.to_toml();
    assert_eq!(TwoStepConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(TwoStepConfig::from_toml(&text).unwrap().hash(), cfg.hash());
    assert!(TwoStepConfig::from_toml("bogus = 1").is_err());
}

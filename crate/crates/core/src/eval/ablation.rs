use log::info;
use serde::{Deserialize, Serialize};

use crate::crf::LabelSequence;
use crate::data::{cross_corpus_split, subject_independent_folds, Corpus};
use crate::error::{Error, Result};
use crate::eval::metrics::{evaluate, Metrics};
use crate::pipeline::{effective_config, train_two_step, TrainedPipeline, TwoStepConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SubjectIndependent,
    CrossCorpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub with_crf: Metrics,
    pub without_crf: Metrics,
    /// CRF training objective (minimized form) before and after each step.
    pub crf_objective_trace: Vec<f64>,
    pub crf_converged: bool,
}

/// With-CRF versus frame-softmax comparison. Headline metrics pool the
/// confusion matrices of all folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub protocol: Protocol,
    pub config_hash: String,
    pub seed: u64,
    pub with_crf: Metrics,
    pub without_crf: Metrics,
    /// `with_crf.per_frame_accuracy − without_crf.per_frame_accuracy`.
    pub delta: f64,
    /// Mean over folds of the per-fold accuracy difference.
    pub mean_fold_delta: f64,
    pub folds: Vec<FoldResult>,
    pub dropped_train_sequences: usize,
    pub dropped_test_sequences: usize,
}

impl AblationReport {
    fn assemble(protocol: Protocol, config_hash: String, seed: u64, folds: Vec<FoldResult>) -> Result<Self> {
        let with: Vec<Metrics> = folds.iter().map(|f| f.with_crf.clone()).collect();
        let without: Vec<Metrics> = folds.iter().map(|f| f.without_crf.clone()).collect();
        let with_crf = Metrics::pooled(&with)?;
        let without_crf = Metrics::pooled(&without)?;
        let mean_fold_delta = folds
            .iter()
            .map(|f| f.with_crf.per_frame_accuracy - f.without_crf.per_frame_accuracy)
            .sum::<f64>()
            / folds.len() as f64;
        Ok(AblationReport {
            protocol,
            config_hash,
            seed,
            delta: with_crf.per_frame_accuracy - without_crf.per_frame_accuracy,
            with_crf,
            without_crf,
            mean_fold_delta,
            folds,
            dropped_train_sequences: 0,
            dropped_test_sequences: 0,
        })
    }

    /// Plain-text summary table.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "protocol {:?}, seed {}, config {}\n{:>6} {:>10} {:>10} {:>8}\n",
            self.protocol,
            self.seed,
            &self.config_hash[..12.min(self.config_hash.len())],
            "fold",
            "with CRF",
            "softmax",
            "delta"
        );
        for f in &self.folds {
            out.push_str(&format!(
                "{:>6} {:>9.2}% {:>9.2}% {:>+7.2}\n",
                f.fold,
                100.0 * f.with_crf.per_frame_accuracy,
                100.0 * f.without_crf.per_frame_accuracy,
                100.0 * (f.with_crf.per_frame_accuracy - f.without_crf.per_frame_accuracy)
            ));
        }
        out.push_str(&format!(
            "{:>6} {:>9.2}% {:>9.2}% {:>+7.2}\n",
            "pooled",
            100.0 * self.with_crf.per_frame_accuracy,
            100.0 * self.without_crf.per_frame_accuracy,
            100.0 * self.delta
        ));
        out
    }
}

/// Both arms on every test sequence, from the same trained extractor.
pub fn predict_both(pipeline: &TrainedPipeline, test: &Corpus) -> Result<(Vec<LabelSequence>, Vec<LabelSequence>)> {
    let mut with = Vec::with_capacity(test.sequences.len());
    let mut without = Vec::with_capacity(test.sequences.len());
    for seq in &test.sequences {
        let frames = pipeline.frames_of(seq)?;
        with.push(pipeline.predict_sequence(&frames)?);
        without.push(pipeline.predict_frames_softmax(&frames)?);
    }
    Ok((with, without))
}

fn run_fold(fold: usize, train: &Corpus, test: &Corpus, config: &TwoStepConfig) -> Result<FoldResult> {
    let (pipeline, report) = train_two_step(train, config)?;
    let (with, without) = predict_both(&pipeline, test)?;
    let truth: Vec<LabelSequence> = test.sequences.iter().map(|s| s.labels()).collect();
    let k = test.label_set.len();
    let result = FoldResult {
        fold,
        train_sequences: train.sequences.len(),
        test_sequences: test.sequences.len(),
        with_crf: evaluate(&with, &truth, k)?,
        without_crf: evaluate(&without, &truth, k)?,
        crf_objective_trace: report.crf.objective_trace,
        crf_converged: report.crf.converged,
    };
    info!(
        "fold {fold}: with CRF {:.4}, softmax {:.4}",
        result.with_crf.per_frame_accuracy, result.without_crf.per_frame_accuracy
    );
    Ok(result)
}

/// `k`-fold subject-independent ablation; `seed` drives both the split and
/// the training runs.
pub fn run_subject_independent(corpus: &Corpus, config: &TwoStepConfig, k: usize, seed: u64) -> Result<AblationReport> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let plan = subject_independent_folds(corpus, k, seed)?;
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, fold) in plan.folds.iter().enumerate() {
        let run = || -> Result<FoldResult> {
            let train = corpus.subset(format!("{}-fold{i}-train", corpus.name), &fold.train)?;
            let test = corpus.subset(format!("{}-fold{i}-test", corpus.name), &fold.test)?;
            run_fold(i, &train, &test, &cfg)
        };
        folds.push(run().map_err(|e| e.in_stage(format!("fold {i}")))?);
    }
    let hash = effective_config(&cfg, corpus.label_set.len()).hash();
    AblationReport::assemble(Protocol::SubjectIndependent, hash, seed, folds)
}

/// Train on every corpus except `test_name`, test on it.
pub fn run_cross_corpus(
    corpora: &[Corpus],
    test_name: &str,
    config: &TwoStepConfig,
    seed: u64,
) -> Result<AblationReport> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let split = cross_corpus_split(corpora, test_name)?;
    if split.train.sequences.is_empty() || split.test.sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let fold =
        run_fold(0, &split.train, &split.test, &cfg).map_err(|e| e.in_stage(format!("test corpus {test_name}")))?;
    let hash = effective_config(&cfg, split.shared.len()).hash();
    let mut report = AblationReport::assemble(Protocol::CrossCorpus, hash, seed, vec![fold])?;
    report.dropped_train_sequences = split.dropped_train_sequences;
    report.dropped_test_sequences = split.dropped_test_sequences;
    Ok(report)
}

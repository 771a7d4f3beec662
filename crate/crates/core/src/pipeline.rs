//! Two-step training: the extractor is fit frame by frame with SGD, frozen,
//! and its per-frame activations train the CRF over whole sequences.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crf::{
    argmax_first, train_crf, viterbi_decode, CrfModel, LabelSequence, LabelSet, ObservationSequence, RegularizedDataset,
};
use crate::data::{Corpus, LabeledSequence};
use crate::error::{Error, Result};
use crate::extractor::{train_extractor, ExtractorConfig, ExtractorModel, SgdConfig, Tensor};
use crate::optim::{OptimConfig, OptimReport};

pub use crate::extractor::FeatureTap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfStageConfig {
    /// Variance of the Gaussian prior; `inf` disables regularization.
    pub sigma2: f64,
    pub optim: OptimConfig,
}

impl Default for CrfStageConfig {
    fn default() -> Self {
        CrfStageConfig {
            sigma2: 10.0,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStepConfig {
    /// `num_classes` and `seed` are overwritten from the corpus and
    /// `seed` below when training.
    pub extractor: ExtractorConfig,
    pub sgd: SgdConfig,
    pub crf: CrfStageConfig,
    pub feature_tap: FeatureTap,
    /// Z-score features with statistics of the training frames.
    pub standardize_features: bool,
    pub seed: u64,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        TwoStepConfig {
            extractor: ExtractorConfig::default(),
            sgd: SgdConfig::default(),
            crf: CrfStageConfig::default(),
            feature_tap: FeatureTap::Penultimate,
            standardize_features: false,
            seed: 0,
        }
    }
}

impl TwoStepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TwoStepConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.extractor.validate()?;
        self.sgd.validate()?;
        self.crf.optim.validate()?;
        if !(self.crf.sigma2 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma2 must be positive, got {}",
                self.crf.sigma2
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Per-dimension affine map `(x − mean) / std` fit on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl FeatureScaler {
    /// Dimensions with standard deviation below `1e-12` are only centered.
    pub fn fit(sequences: &[ObservationSequence]) -> Result<Self> {
        let dim = sequences.first().ok_or(Error::EmptyCorpus)?.dim();
        let mut count = 0usize;
        let mut mean = vec![0.0; dim];
        for row in sequences.iter().flat_map(ObservationSequence::rows) {
            count += 1;
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; dim];
        for row in sequences.iter().flat_map(ObservationSequence::rows) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std = var
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    1.0 / sd
                }
            })
            .collect();
        Ok(FeatureScaler { mean, inv_std })
    }

    pub fn apply(&self, obs: &ObservationSequence) -> Result<ObservationSequence> {
        if obs.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "scaler fit on {} features applied to {}",
                self.mean.len(),
                obs.dim()
            )));
        }
        let data = obs
            .rows()
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.inv_std)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect();
        ObservationSequence::new(obs.len(), obs.dim(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    extractor: ExtractorModel,
    crf: CrfModel,
    feature_tap: FeatureTap,
    scaler: Option<FeatureScaler>,
    provenance: Provenance,
}

impl TrainedPipeline {
    /// Checks that the CRF consumes the extractor's tap width and that the
    /// label counts agree.
    pub fn new(
        extractor: ExtractorModel,
        crf: CrfModel,
        feature_tap: FeatureTap,
        scaler: Option<FeatureScaler>,
        provenance: Provenance,
    ) -> Result<Self> {
        let width = extractor.tap_dim(feature_tap);
        if crf.dim() != width {
            return Err(Error::DimensionMismatch(format!(
                "CRF expects {}-dimensional observations, extractor tap gives {width}",
                crf.dim()
            )));
        }
        if crf.num_labels() != extractor.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "CRF has {} labels, extractor {} classes",
                crf.num_labels(),
                extractor.num_classes()
            )));
        }
        if let Some(s) = &scaler {
            if s.mean.len() != width || s.inv_std.len() != width {
                return Err(Error::DimensionMismatch("feature scaler width".into()));
            }
        }
        Ok(TrainedPipeline {
            extractor,
            crf,
            feature_tap,
            scaler,
            provenance,
        })
    }

    pub fn extractor(&self) -> &ExtractorModel {
        &self.extractor
    }

    pub fn crf(&self) -> &CrfModel {
        &self.crf
    }

    pub fn label_set(&self) -> &LabelSet {
        self.crf.labels()
    }

    pub fn feature_tap(&self) -> FeatureTap {
        self.feature_tap
    }

    pub fn scaler(&self) -> Option<&FeatureScaler> {
        self.scaler.as_ref()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Observation sequence the CRF sees for `frames` (`T × H × W × C`).
    pub fn features(&self, frames: &Tensor) -> Result<ObservationSequence> {
        let obs = self.extractor.extract_features(frames, self.feature_tap)?;
        match &self.scaler {
            Some(s) => s.apply(&obs),
            None => Ok(obs),
        }
    }

    /// Viterbi labeling of a preprocessed frame sequence.
    pub fn predict_sequence(&self, frames: &Tensor) -> Result<LabelSequence> {
        viterbi_decode(&self.crf, &self.features(frames)?)
    }

    /// The no-CRF baseline: per-frame argmax of the extractor's logits.
    pub fn predict_frames_softmax(&self, frames: &Tensor) -> Result<LabelSequence> {
        predict_frames_softmax(&self.extractor, frames)
    }

    /// Preprocesses a corpus sequence to the extractor's input size.
    pub fn frames_of(&self, seq: &LabeledSequence) -> Result<Tensor> {
        let c = self.extractor.config();
        seq.frame_tensor(c.input_height, c.input_width, c.input_channels)
    }
}

/// Per-frame argmax of the logits, smallest index on ties.
pub fn predict_frames_softmax(extractor: &ExtractorModel, frames: &Tensor) -> Result<LabelSequence> {
    let logits = extractor.extract_features(frames, FeatureTap::Logits)?;
    Ok(LabelSequence(logits.rows().map(argmax_first).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepReport {
    pub extractor_losses: Vec<f64>,
    pub crf: OptimReport,
    pub train_sequences: usize,
    pub train_frames: usize,
}

/// The configuration actually used to train on a corpus with `num_labels`
/// labels: the extractor's class count and seed are filled in.
pub fn effective_config(config: &TwoStepConfig, num_labels: usize) -> TwoStepConfig {
    let mut cfg = config.clone();
    cfg.extractor.num_classes = num_labels;
    cfg.extractor.seed = config.seed;
    cfg
}

/// Seed of the minibatch order and dropout masks, derived from the
/// pipeline seed so it differs from the initialization stream.
fn sgd_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

pub fn train_two_step(train: &Corpus, config: &TwoStepConfig) -> Result<(TrainedPipeline, TwoStepReport)> {
    let cfg = effective_config(config, train.label_set.len());
    cfg.validate()?;
    let ec = &cfg.extractor;

    let mut lengths = Vec::with_capacity(train.sequences.len());
    let mut data = Vec::with_capacity(train.num_frames() * ec.input_len());
    let mut labels = Vec::with_capacity(train.num_frames());
    for seq in &train.sequences {
        let frames = seq
            .frame_tensor(ec.input_height, ec.input_width, ec.input_channels)
            .map_err(|e| e.in_stage(format!("preprocessing sequence `{}`", seq.sequence_id)))?;
        data.extend(frames.into_data());
        labels.extend(seq.frames.iter().map(|f| f.label));
        lengths.push(seq.len());
    }
    let total = labels.len();
    let all_frames = Tensor::new(vec![total, ec.input_height, ec.input_width, ec.input_channels], data)?;

    info!("training extractor on {total} frames from {} sequences", lengths.len());
    let mut extractor = ExtractorModel::new(ec.clone()).map_err(|e| e.in_stage("extractor training"))?;
    let log = train_extractor(&mut extractor, &all_frames, &labels, &cfg.sgd, sgd_seed(cfg.seed))
        .map_err(|e| e.in_stage("extractor training"))?;

    let frame_len = ec.input_len();
    let mut observations = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &len in &lengths {
        let frames = Tensor::new(
            vec![len, ec.input_height, ec.input_width, ec.input_channels],
            all_frames.data()[start * frame_len..(start + len) * frame_len].to_vec(),
        )?;
        observations.push(
            extractor
                .extract_features(&frames, cfg.feature_tap)
                .map_err(|e| e.in_stage("feature extraction"))?,
        );
        start += len;
    }
    let scaler = if cfg.standardize_features {
        let s = FeatureScaler::fit(&observations)?;
        observations = observations.iter().map(|o| s.apply(o)).collect::<Result<_>>()?;
        Some(s)
    } else {
        None
    };

    info!("training CRF on {} sequences", observations.len());
    let items = observations
        .into_iter()
        .zip(train.sequences.iter().map(LabeledSequence::labels))
        .collect();
    let dataset = RegularizedDataset::new(items, cfg.crf.sigma2).map_err(|e| e.in_stage("CRF training"))?;
    let init = CrfModel::zeros(train.label_set.clone(), extractor.tap_dim(cfg.feature_tap))?;
    let (crf, crf_report) = train_crf(&dataset, &init, &cfg.crf.optim).map_err(|e| e.in_stage("CRF training"))?;

    let provenance = Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let pipeline = TrainedPipeline::new(extractor, crf, cfg.feature_tap, scaler, provenance)?;
    Ok((
        pipeline,
        TwoStepReport {
            extractor_losses: log.losses,
            crf: crf_report,
            train_sequences: lengths.len(),
            train_frames: total,
        },
    ))
}

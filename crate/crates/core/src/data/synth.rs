use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::crf::LabelSet;
use crate::data::corpus::{Corpus, FrameRecord, LabeledSequence};
use crate::data::image::Image;
use crate::error::{Error, Result};

/// Temporal shape of generated sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceStyle {
    /// Neutral, ramp to apex, hold, ramp back, neutral.
    OnsetOffset,
    /// Neutral, ramp to apex, hold until the end.
    Onset,
    /// Each sequence picks one of the two at random.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    pub num_subjects: usize,
    pub sequences_per_subject: usize,
    /// Number of labels including neutral (label 0).
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of independent per-pixel Gaussian noise.
    pub apex_noise: f64,
    /// Frames strictly between neutral and apex on each ramp.
    pub transition_frames: usize,
    /// Inclusive range of neutral frames before the onset and after the offset.
    pub neutral_frames: (usize, usize),
    /// Inclusive range of frames held at the apex.
    pub apex_frames: (usize, usize),
    pub style: SequenceStyle,
    /// Mean of the per-subject additive brightness offset.
    pub subject_bias_mean: f64,
    /// Amplitude of each subject's offset-plus-gradient appearance pattern.
    pub subject_bias: f64,
    /// Contrast of the class prototypes around mid-gray.
    pub prototype_contrast: f64,
    /// Seed for the class prototypes; corpora sharing it share classes.
    pub prototype_seed: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthetic".into(),
            num_subjects: 30,
            sequences_per_subject: 10,
            num_classes: 5,
            image_size: 32,
            channels: 1,
            apex_noise: 0.6,
            transition_frames: 6,
            neutral_frames: (2, 4),
            apex_frames: (3, 6),
            style: SequenceStyle::Mixed,
            subject_bias_mean: 0.0,
            subject_bias: 0.08,
            prototype_contrast: 0.3,
            prototype_seed: 7,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic corpus: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2 (label 0 is neutral)");
        }
        if self.num_subjects == 0 || self.sequences_per_subject == 0 {
            return bad("num_subjects and sequences_per_subject must be positive");
        }
        if self.image_size == 0 || !(self.channels == 1 || self.channels == 3) {
            return bad("image_size must be positive and channels 1 or 3");
        }
        if !(self.apex_noise >= 0.0 && self.apex_noise.is_finite()) {
            return bad("apex_noise must be finite and non-negative");
        }
        if self.neutral_frames.0 > self.neutral_frames.1 || self.apex_frames.0 > self.apex_frames.1 {
            return bad("frame ranges must have min <= max");
        }
        if self.apex_frames.1 == 0 {
            return bad("apex_frames must allow at least one frame");
        }
        if ![self.subject_bias, self.subject_bias_mean, self.prototype_contrast]
            .iter()
            .all(|v| v.is_finite())
            || self.subject_bias < 0.0
            || !(0.0..=0.5).contains(&self.prototype_contrast)
        {
            return bad("subject_bias must be non-negative and prototype_contrast in [0, 0.5]");
        }
        Ok(())
    }
}

/// Blend coefficients of one sequence, from neutral (0) to apex (1).
/// Ramp frames take `i / (n + 1)` for `i = 1..=n`.
pub fn blend_schedule(lead: usize, ramp: usize, hold: usize, tail: Option<usize>) -> Vec<f64> {
    let up = (1..=ramp).map(|i| i as f64 / (ramp + 1) as f64);
    let mut alphas: Vec<f64> = std::iter::repeat_n(0.0, lead)
        .chain(up.clone())
        .chain(std::iter::repeat_n(1.0, hold))
        .collect();
    if let Some(tail) = tail {
        alphas.extend(up.rev());
        alphas.extend(std::iter::repeat_n(0.0, tail));
    }
    alphas
}

/// Label of a frame with blend `alpha` in a sequence of class `class`.
pub fn frame_label(alpha: f64, class: usize) -> usize {
    if alpha >= 0.5 {
        class
    } else {
        0
    }
}

/// Oriented sinusoidal gratings around mid-gray, one per label. Neutral has
/// a quarter of the class contrast.
pub fn prototypes(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.prototype_seed);
    let n = cfg.image_size;
    let k = cfg.num_classes;
    (0..k)
        .map(|c| {
            let (theta, contrast) = if c == 0 {
                (rng.random_range(0.0..PI), cfg.prototype_contrast / 4.0)
            } else {
                (PI * (c - 1) as f64 / (k - 1) as f64, cfg.prototype_contrast)
            };
            let freq = rng.random_range(2.5..4.5) / n as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            let (s, co) = theta.sin_cos();
            let mut img = Vec::with_capacity(n * n * cfg.channels);
            for y in 0..n {
                for x in 0..n {
                    let u = x as f64 * co + y as f64 * s;
                    let v = 0.5 + contrast * (2.0 * PI * freq * u + phase).sin();
                    img.extend(std::iter::repeat_n(v, cfg.channels));
                }
            }
            img
        })
        .collect()
}

/// Generates a corpus of expression-like sequences: each frame blends the
/// neutral prototype with its sequence's class prototype, plus a per-subject
/// appearance pattern and independent pixel noise, clamped to `[0, 1]`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let n = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.apex_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut sequences = Vec::new();
    for subject in 0..cfg.num_subjects {
        let offset = cfg.subject_bias_mean + cfg.subject_bias * rng.random_range(-1.0..1.0);
        let gx = cfg.subject_bias * rng.random_range(-1.0..1.0);
        let gy = cfg.subject_bias * rng.random_range(-1.0..1.0);
        let bias: Vec<f64> = (0..n * n)
            .flat_map(|p| {
                let (y, x) = ((p / n) as f64, (p % n) as f64);
                let v = offset + gx * (x / n as f64 - 0.5) + gy * (y / n as f64 - 0.5);
                std::iter::repeat_n(v, cfg.channels)
            })
            .collect();
        for j in 0..cfg.sequences_per_subject {
            let class = rng.random_range(1..cfg.num_classes);
            let offset_style = match cfg.style {
                SequenceStyle::OnsetOffset => true,
                SequenceStyle::Onset => false,
                SequenceStyle::Mixed => rng.random_bool(0.5),
            };
            let lead = rng.random_range(cfg.neutral_frames.0..=cfg.neutral_frames.1);
            let hold = rng.random_range(cfg.apex_frames.0.max(1)..=cfg.apex_frames.1);
            let tail = offset_style.then(|| rng.random_range(cfg.neutral_frames.0..=cfg.neutral_frames.1));
            let alphas = blend_schedule(lead, cfg.transition_frames, hold, tail);
            let frames = alphas
                .iter()
                .enumerate()
                .map(|(t, &alpha)| {
                    let data = protos[0]
                        .iter()
                        .zip(&protos[class])
                        .zip(&bias)
                        .map(|((p0, pc), b)| {
                            let v = (1.0 - alpha) * p0 + alpha * pc + b;
                            let v = if cfg.apex_noise > 0.0 {
                                v + noise.sample(&mut rng)
                            } else {
                                v
                            };
                            v.clamp(0.0, 1.0)
                        })
                        .collect();
                    Ok(FrameRecord {
                        image: Image::new(n, n, cfg.channels, data)?,
                        label: frame_label(alpha, class),
                        frame_index: t,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(LabeledSequence {
                sequence_id: format!("{}-s{subject:03}-q{j:03}", cfg.name),
                subject_id: format!("{}-s{subject:03}", cfg.name),
                frames,
            });
        }
    }
    Corpus::new(cfg.name.clone(), LabelSet::expressions(cfg.num_classes)?, sequences)
}

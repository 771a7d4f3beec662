use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::crf::{LabelSequence, LabelSet};
use crate::data::image::{preprocess_frame, Image};
use crate::error::{Error, Result};
use crate::extractor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image: Image,
    pub label: usize,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub sequence_id: String,
    pub subject_id: String,
    pub frames: Vec<FrameRecord>,
}

impl LabeledSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn labels(&self) -> LabelSequence {
        LabelSequence(self.frames.iter().map(|f| f.label).collect())
    }

    /// Frames preprocessed to `height × width × channels`, stacked as a
    /// `T × H × W × C` tensor.
    pub fn frame_tensor(&self, height: usize, width: usize, channels: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.len() * height * width * channels);
        for f in &self.frames {
            data.extend_from_slice(preprocess_frame(&f.image, height, width, channels)?.data());
        }
        Tensor::new(vec![self.len(), height, width, channels], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub label_set: LabelSet,
    pub sequences: Vec<LabeledSequence>,
}

impl Corpus {
    /// Validates the corpus invariants: at least one sequence, no empty
    /// sequences, unique sequence ids, labels in range and strictly
    /// increasing frame indices.
    pub fn new(name: impl Into<String>, label_set: LabelSet, sequences: Vec<LabeledSequence>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for s in &sequences {
            if !seen.insert(s.sequence_id.as_str()) {
                return Err(Error::DuplicateSequenceId(s.sequence_id.clone()));
            }
            if s.frames.is_empty() {
                return Err(Error::parse(
                    "corpus",
                    format!("sequence `{}` has no frames", s.sequence_id),
                ));
            }
            if s.frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
                return Err(Error::NonMonotoneFrames(s.sequence_id.clone()));
            }
            if let Some(f) = s.frames.iter().find(|f| f.label >= label_set.len()) {
                return Err(Error::LabelOutOfRange {
                    label: f.label,
                    num_labels: label_set.len(),
                    context: format!("sequence `{}`", s.sequence_id),
                });
            }
        }
        Ok(Corpus {
            name: name.into(),
            label_set,
            sequences,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(LabeledSequence::len).sum()
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.sequences
            .iter()
            .map(|s| s.subject_id.as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    /// The sequences whose ids are listed, in corpus order.
    pub fn subset(&self, name: impl Into<String>, ids: &[String]) -> Result<Corpus> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let sequences = self
            .sequences
            .iter()
            .filter(|s| wanted.contains(s.sequence_id.as_str()))
            .cloned()
            .collect();
        Corpus::new(name, self.label_set.clone(), sequences)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    name: String,
    labels: Vec<String>,
    sequences: Vec<ManifestSequence>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSequence {
    sequence_id: String,
    subject_id: String,
    frames: Vec<ManifestFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFrame {
    image_path: PathBuf,
    label_index: usize,
    /// Defaults to the frame's position in the list.
    #[serde(default)]
    frame_index: Option<usize>,
}

fn read_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = f64::from(u16::MAX);
    if img.color().has_color() {
        let buf = img.to_rgb16();
        Image::new(
            h,
            w,
            3,
            buf.into_raw().into_iter().map(|v| f64::from(v) / scale).collect(),
        )
    } else {
        let buf = img.to_luma16();
        Image::new(
            h,
            w,
            1,
            buf.into_raw().into_iter().map(|v| f64::from(v) / scale).collect(),
        )
    }
}

fn write_image(path: &Path, image: &Image) -> Result<()> {
    let quantize = |v: &f64| (v * f64::from(u16::MAX)).round() as u16;
    let raw: Vec<u16> = image.data().iter().map(quantize).collect();
    let (w, h) = (image.width() as u32, image.height() as u32);
    let dynamic = match image.channels() {
        1 => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw).map(DynamicImage::ImageLuma16),
        3 => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, raw).map(DynamicImage::ImageRgb16),
        c => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("cannot store a {c}-channel image"),
            })
        }
    }
    .expect("buffer length matches dimensions");
    dynamic.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads a JSON manifest and the images it lists. Image paths are relative
/// to the manifest's directory. Pixels are scaled to `[0, 1]`.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse("corpus manifest", e))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::parse(
            "corpus manifest",
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let label_set = LabelSet::new(manifest.labels).map_err(|e| Error::parse("corpus manifest labels", e))?;
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for s in manifest.sequences {
        let mut frames = Vec::with_capacity(s.frames.len());
        for (pos, f) in s.frames.into_iter().enumerate() {
            if f.label_index >= label_set.len() {
                return Err(Error::LabelOutOfRange {
                    label: f.label_index,
                    num_labels: label_set.len(),
                    context: format!("sequence `{}`", s.sequence_id),
                });
            }
            frames.push(FrameRecord {
                image: read_image(&base.join(&f.image_path))?,
                label: f.label_index,
                frame_index: f.frame_index.unwrap_or(pos),
            });
        }
        sequences.push(LabeledSequence {
            sequence_id: s.sequence_id,
            subject_id: s.subject_id,
            frames,
        });
    }
    Corpus::new(manifest.name, label_set, sequences)
}

/// Writes `dir/manifest.json` and one 16-bit PNG per frame under
/// `dir/frames/`. Pixel values are quantized to multiples of 1/65535, so a
/// saved-then-loaded corpus saves back to identical files.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut sequences = Vec::with_capacity(corpus.sequences.len());
    for (i, s) in corpus.sequences.iter().enumerate() {
        let mut frames = Vec::with_capacity(s.len());
        for f in &s.frames {
            let rel = PathBuf::from("frames").join(format!("s{i:05}_f{:05}.png", f.frame_index));
            write_image(&dir.join(&rel), &f.image)?;
            frames.push(ManifestFrame {
                image_path: rel,
                label_index: f.label,
                frame_index: Some(f.frame_index),
            });
        }
        sequences.push(ManifestSequence {
            sequence_id: s.sequence_id.clone(),
            subject_id: s.subject_id.clone(),
            frames,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        name: corpus.name.clone(),
        labels: corpus.label_set.names().to_vec(),
        sequences,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse("corpus manifest", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

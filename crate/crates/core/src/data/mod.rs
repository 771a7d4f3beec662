//! Corpora of labeled frame sequences: ingestion, synthetic generation and
//! evaluation splits.

mod corpus;
mod features;
mod image;
mod split;
mod synth;

pub use corpus::{load_corpus, save_corpus, Corpus, FrameRecord, LabeledSequence, MANIFEST_VERSION};
pub use features::{
    format_feature_sequence, parse_feature_sequence, read_feature_dir, read_feature_sequence, write_feature_sequence,
    FEATURE_EXTENSION,
};
pub use image::{preprocess_frame, Image};
pub use split::{check_split, cross_corpus_split, subject_independent_folds, CrossCorpusSplit, Fold, SplitPlan};
pub use synth::{blend_schedule, frame_label, generate_synthetic_corpus, prototypes, SequenceStyle, SynthConfig};

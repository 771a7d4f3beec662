//! Metrics, ablation protocols and model files.

mod ablation;
mod metrics;
mod model_io;

pub use ablation::{predict_both, run_cross_corpus, run_subject_independent, AblationReport, FoldResult, Protocol};
pub use metrics::{evaluate, Metrics};
pub use model_io::{
    decode_model, encode_model, load_model, save_model, write_atomic, MODEL_FORMAT_VERSION, MODEL_MAGIC,
};

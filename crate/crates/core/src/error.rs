use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Data,
    Dimension,
    Numeric,
    ModelFormat,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Dimension => 5,
            ErrorCategory::Numeric => 6,
            ErrorCategory::ModelFormat => 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("label {label} out of range for {num_labels} labels ({context})")]
    LabelOutOfRange {
        label: usize,
        num_labels: usize,
        context: String,
    },

    #[error("duplicate sequence id `{0}`")]
    DuplicateSequenceId(String),

    #[error("frame indices not strictly increasing in sequence `{0}`")]
    NonMonotoneFrames(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },

    #[error("image error on {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("cannot build {folds} subject-disjoint folds from {subjects} subjects")]
    TooFewSubjects { subjects: usize, folds: usize },

    #[error("unknown corpus `{0}`")]
    UnknownCorpus(String),

    #[error("corpora share no labels")]
    NoSharedLabels,

    #[error("predictions and truth are misaligned: {0}")]
    Misaligned(String),

    #[error("non-finite objective or gradient at iterate {iteration}")]
    NonFiniteIterate { iteration: usize },

    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }

    /// Wraps `self` with the name of the stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self.root() {
            Error::DimensionMismatch(_) => ErrorCategory::Dimension,
            Error::NonFinite(_) | Error::NonFiniteIterate { .. } => ErrorCategory::Numeric,
            Error::InvalidConfig(_) => ErrorCategory::Config,
            Error::MissingFile(_) | Error::Io { .. } => ErrorCategory::Io,
            Error::VersionMismatch { .. } | Error::CorruptModel(_) => ErrorCategory::ModelFormat,
            Error::EmptyCorpus
            | Error::LabelOutOfRange { .. }
            | Error::DuplicateSequenceId(_)
            | Error::NonMonotoneFrames(_)
            | Error::Parse { .. }
            | Error::Image { .. }
            | Error::TooFewSubjects { .. }
            | Error::UnknownCorpus(_)
            | Error::NoSharedLabels
            | Error::Misaligned(_) => ErrorCategory::Data,
            Error::Stage { .. } => unreachable!("root() strips stage wrappers"),
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

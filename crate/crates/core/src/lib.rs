//! Frame-wise sequence labeling with a residual convolutional feature
//! extractor cascaded with a linear-chain conditional random field.
//!
//! The extractor is trained first on individual labeled frames with softmax
//! cross-entropy and momentum SGD. It is then frozen, its per-frame
//! activations become the CRF's observation sequences, and the CRF is fit on
//! the whole training set at once with L-BFGS.

pub mod checks;
pub mod crf;
pub mod data;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod optim;
pub mod oracle;
pub mod pipeline;

pub use error::{Error, ErrorCategory, Result};

//! Linear-chain conditional random field over dense per-frame features.
//!
//! State potentials are per-label linear functions of the frame feature
//! vector plus a per-label bias; transition potentials are a `K × K` table
//! independent of the observations.

mod inference;
mod model;
mod objective;
mod train;

pub use inference::argmax_first;
pub use inference::{forward_backward, log_partition, log_sum_exp, sequence_score, viterbi_decode};
pub use model::{CrfModel, LabelSequence, LabelSet, Marginals, ObservationSequence, RegularizedDataset};
pub use objective::{objective, objective_and_gradient, objective_gradient};
pub use train::train_crf;

//! Frame-level residual convolutional network.

mod config;
mod network;
mod norm;
mod sgd;
mod tensor;

pub use config::{BlockSpec, ConvSpec, ExtractorConfig, ReductionSpec, SgdConfig, StageSpec};
pub use network::{
    extract_features, residual_block, softmax_cross_entropy, BackwardOutput, BatchStats, ExtractorModel, FeatureTap,
    ForwardOutput, Mode, ParamGroup, ResidualBlock, INIT_GAIN,
};
pub use norm::{batch_norm, BatchNormParams, BN_EPSILON, BN_MOMENTUM};
pub use sgd::{sgd_step, sgd_update, train_extractor, ExtractorTrainLog, Velocity};
pub use tensor::{conv2d, Padding, Tensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::tensor::{output_extent, Padding};

/// One convolution, always followed by batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "same")]
    pub padding: Padding,
}

fn one() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Stride-1, same-padded convolution.
    pub fn same(out_channels: usize, kernel: usize) -> Self {
        Self::new(out_channels, kernel, 1, Padding::Same)
    }
}

/// Residual unit: parallel convolution branches, concatenated, projected
/// back to the input width by a 1×1 convolution and added to the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub branches: Vec<Vec<ConvSpec>>,
}

/// Grid reduction: parallel strided branches whose outputs are
/// concatenated along channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionSpec {
    pub branches: Vec<Vec<ConvSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    #[serde(default)]
    pub reduction: Option<ReductionSpec>,
    #[serde(default)]
    pub blocks: Vec<BlockSpec>,
}

/// Missing fields take their values from [`ExtractorConfig::desk`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    /// Width of the first fully-connected layer.
    pub feature_dim: usize,
    pub stem: Vec<ConvSpec>,
    pub stages: Vec<StageSpec>,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::desk(2)
    }
}

fn two_branch_block(width: usize) -> BlockSpec {
    BlockSpec {
        branches: vec![
            vec![ConvSpec::same(width, 1)],
            vec![ConvSpec::same(width, 1), ConvSpec::same(width, 3)],
        ],
    }
}

impl ExtractorConfig {
    /// The default desk-scale topology for `32 × 32 × 1` frames:
    /// 3×3 conv (8, valid), 3×3/2 conv (16, valid), two residual blocks,
    /// a two-branch stride-2 reduction to 32 channels, two more residual
    /// blocks, global average pooling, dropout 0.2, dense(32), dense(K).
    pub fn desk(num_classes: usize) -> Self {
        ExtractorConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 1,
            num_classes,
            feature_dim: 32,
            stem: vec![
                ConvSpec::new(8, 3, 1, Padding::Valid),
                ConvSpec::new(16, 3, 2, Padding::Valid),
            ],
            stages: vec![
                StageSpec {
                    reduction: None,
                    blocks: vec![two_branch_block(8), two_branch_block(8)],
                },
                StageSpec {
                    reduction: Some(ReductionSpec {
                        branches: vec![
                            vec![ConvSpec::new(16, 3, 2, Padding::Valid)],
                            vec![ConvSpec::same(8, 1), ConvSpec::new(16, 3, 2, Padding::Valid)],
                        ],
                    }),
                    blocks: vec![two_branch_block(16), two_branch_block(16)],
                },
            ],
            dropout_rate: 0.2,
            seed: 0,
        }
    }

    /// A small network on `8 × 8` inputs with one residual block, used for
    /// gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        ExtractorConfig {
            input_height: 8,
            input_width: 8,
            input_channels: 1,
            num_classes,
            feature_dim: 5,
            stem: vec![ConvSpec::same(4, 3)],
            stages: vec![StageSpec {
                reduction: None,
                blocks: vec![BlockSpec {
                    branches: vec![
                        vec![ConvSpec::same(2, 1)],
                        vec![ConvSpec::same(2, 1), ConvSpec::same(3, 3)],
                    ],
                }],
            }],
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_height * self.input_width * self.input_channels
    }

    /// Checks every stage fits the spatial extent it receives and returns
    /// the final `(H, W, C)` before pooling.
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return bad("input dimensions must be positive".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        let mut shape = (self.input_height, self.input_width, self.input_channels);
        let apply = |shape: (usize, usize, usize), conv: &ConvSpec, at: &str| {
            if conv.out_channels == 0 || conv.kernel == 0 || conv.stride == 0 {
                return Err(Error::InvalidConfig(format!("{at}: zero-sized convolution")));
            }
            let h = output_extent(shape.0, conv.kernel, conv.stride, conv.padding);
            let w = output_extent(shape.1, conv.kernel, conv.stride, conv.padding);
            match (h, w) {
                (Some(h), Some(w)) => Ok((h, w, conv.out_channels)),
                _ => Err(Error::InvalidConfig(format!(
                    "{at}: {}x{} kernel does not fit a {}x{} input",
                    conv.kernel, conv.kernel, shape.0, shape.1
                ))),
            }
        };
        for (i, conv) in self.stem.iter().enumerate() {
            shape = apply(shape, conv, &format!("stem conv {i}"))?;
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(red) = &stage.reduction {
                if red.branches.is_empty() || red.branches.iter().any(Vec::is_empty) {
                    return bad(format!("stage {s} reduction has an empty branch"));
                }
                let mut out: Option<(usize, usize)> = None;
                let mut channels = 0;
                for (b, branch) in red.branches.iter().enumerate() {
                    let mut bs = shape;
                    for (i, conv) in branch.iter().enumerate() {
                        bs = apply(bs, conv, &format!("stage {s} reduction branch {b} conv {i}"))?;
                    }
                    if out.is_some_and(|o| o != (bs.0, bs.1)) {
                        return bad(format!("stage {s} reduction branches disagree on output size"));
                    }
                    out = Some((bs.0, bs.1));
                    channels += bs.2;
                }
                let (h, w) = out.expect("non-empty branches");
                shape = (h, w, channels);
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                if block.branches.is_empty() || block.branches.iter().any(Vec::is_empty) {
                    return bad(format!("stage {s} block {b} has an empty branch"));
                }
                for branch in &block.branches {
                    for conv in branch {
                        if conv.stride != 1 || conv.padding != Padding::Same {
                            return bad(format!(
                                "stage {s} block {b}: residual branches must use stride 1 and same padding"
                            ));
                        }
                        apply(shape, conv, "residual branch")?;
                    }
                }
            }
        }
        Ok(shape)
    }
}

/// Momentum SGD with weight decay and a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: usize,
    pub batch_size: usize,
    pub total_iterations: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0001,
            base_lr: 0.01,
            lr_drop_factor: 10.0,
            lr_drop_every: 300,
            batch_size: 32,
            total_iterations: 600,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.base_lr > 0.0
            && self.lr_drop_factor > 0.0
            && self.lr_drop_every > 0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid SGD settings: {self:?}")))
        }
    }

    /// Learning rate at `iteration`: `base_lr / factor^⌊iteration / drop_every⌋`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = (iteration / self.lr_drop_every) as i32;
        self.base_lr / self.lr_drop_factor.powi(drops)
    }
}

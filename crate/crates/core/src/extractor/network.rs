//! The residual convolutional network, its forward pass and its manually
//! derived backward pass.
//!
//! All trainable parameters live in one flat vector and all normalization
//! running statistics in another; layers refer to them by offset. Gradients
//! share the parameter vector's layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::config::{BlockSpec, ConvSpec, ExtractorConfig};
use crate::extractor::norm::{self, ChannelStats, NormCache};
use crate::extractor::tensor::{ConvGeom, Padding, Tensor};

/// Weights are drawn from `U(-a, a)` with `a = sqrt(INIT_GAIN / fan_in)`.
pub const INIT_GAIN: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Running statistics, no dropout. Deterministic.
    Inference,
    /// Batch statistics and a dropout mask drawn from `dropout_seed`.
    Training { dropout_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Init {
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

/// A named contiguous slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
    init: Init,
}

impl ParamGroup {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Default)]
struct Alloc {
    params: usize,
    buffers: usize,
    groups: Vec<ParamGroup>,
    buffer_groups: Vec<ParamGroup>,
}

impl Alloc {
    fn param(&mut self, name: String, len: usize, init: Init) -> usize {
        let start = self.params;
        self.groups.push(ParamGroup { name, start, len, init });
        self.params += len;
        start
    }

    fn buffer(&mut self, name: String, len: usize, init: Init) -> usize {
        let start = self.buffers;
        self.buffer_groups.push(ParamGroup { name, start, len, init });
        self.buffers += len;
        start
    }

    fn conv_unit(&mut self, name: &str, cin: usize, spec: &ConvSpec, relu: bool) -> ConvUnit {
        let (k, cout) = (spec.kernel, spec.out_channels);
        ConvUnit {
            kernel: k,
            cin,
            cout,
            stride: spec.stride,
            padding: spec.padding,
            relu,
            weight: self.param(
                format!("{name}.conv"),
                k * k * cin * cout,
                Init::Uniform { fan_in: k * k * cin },
            ),
            gamma: self.param(format!("{name}.bn.gamma"), cout, Init::Ones),
            beta: self.param(format!("{name}.bn.beta"), cout, Init::Zeros),
            mean: self.buffer(format!("{name}.bn.running_mean"), cout, Init::Zeros),
            var: self.buffer(format!("{name}.bn.running_var"), cout, Init::Ones),
        }
    }

    fn branch(&mut self, name: &str, mut cin: usize, convs: &[ConvSpec]) -> (Vec<ConvUnit>, usize) {
        let units = convs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let u = self.conv_unit(&format!("{name}.{i}"), cin, spec, true);
                cin = spec.out_channels;
                u
            })
            .collect();
        (units, cin)
    }

    fn block(&mut self, name: &str, channels: usize, spec: &BlockSpec) -> Block {
        let mut concat = 0;
        let branches = spec
            .branches
            .iter()
            .enumerate()
            .map(|(b, convs)| {
                let (units, out) = self.branch(&format!("{name}.branch{b}"), channels, convs);
                concat += out;
                units
            })
            .collect();
        let project = self.conv_unit(&format!("{name}.project"), concat, &ConvSpec::same(channels, 1), false);
        Block { branches, project }
    }

    fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Dense {
        Dense {
            inputs,
            outputs,
            weight: self.param(
                format!("{name}.weight"),
                inputs * outputs,
                Init::Uniform { fan_in: inputs },
            ),
            bias: self.param(format!("{name}.bias"), outputs, Init::Zeros),
        }
    }
}

fn initialize(groups: &[ParamGroup], len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut values = vec![0.0; len];
    for g in groups {
        let slot = &mut values[g.range()];
        match g.init {
            Init::Uniform { fan_in } => {
                let a = (INIT_GAIN / fan_in as f64).sqrt();
                slot.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
            }
            Init::Ones => slot.fill(1.0),
            Init::Zeros => slot.fill(0.0),
        }
    }
    values
}

/// NHWC activations.
#[derive(Debug, Clone)]
struct Act {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

/// Normalization statistics gathered by a training-mode pass, to be folded
/// into the running statistics with [`ExtractorModel::apply_batch_stats`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats(Vec<(usize, usize, ChannelStats)>);

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvUnit {
    kernel: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    padding: Padding,
    relu: bool,
    weight: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

struct UnitCache {
    geom: ConvGeom,
    input: Vec<f64>,
    norm: NormCache,
    output: Vec<f64>,
}

impl ConvUnit {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.weight..self.weight + self.kernel * self.kernel * self.cin * self.cout]
    }

    fn forward(
        &self,
        p: &[f64],
        buf: &[f64],
        x: &Act,
        train: bool,
        stats: &mut Vec<(usize, usize, ChannelStats)>,
    ) -> Result<(Act, Option<UnitCache>)> {
        let geom = ConvGeom::new(
            x.n,
            x.h,
            x.w,
            x.c,
            self.kernel,
            self.kernel,
            self.cout,
            self.stride,
            self.padding,
        )?;
        let z = geom.forward(&x.data, self.weights(p));
        let gamma = &p[self.gamma..self.gamma + self.cout];
        let beta = &p[self.beta..self.beta + self.cout];
        let (mut y, cache) = if train {
            let (y, norm, s) = norm::forward_train(&z, self.cout, gamma, beta);
            stats.push((self.mean, self.var, s));
            (y, Some(norm))
        } else {
            let y = norm::forward_infer(
                &z,
                self.cout,
                gamma,
                beta,
                &buf[self.mean..self.mean + self.cout],
                &buf[self.var..self.var + self.cout],
            );
            (y, None)
        };
        if self.relu {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let out = Act {
            n: x.n,
            h: geom.oh,
            w: geom.ow,
            c: self.cout,
            data: y,
        };
        let cache = cache.map(|norm| UnitCache {
            geom,
            input: x.data.clone(),
            norm,
            output: out.data.clone(),
        });
        Ok((out, cache))
    }

    fn backward(&self, p: &[f64], cache: &UnitCache, mut dy: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        if self.relu {
            for (d, o) in dy.iter_mut().zip(&cache.output) {
                if *o <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let gamma = &p[self.gamma..self.gamma + self.cout];
        let (dgamma, dbeta) = {
            let (lo, hi) = grad.split_at_mut(self.beta);
            (&mut lo[self.gamma..self.gamma + self.cout], &mut hi[..self.cout])
        };
        let dz = norm::backward_train(&dy, &cache.norm, gamma, dgamma, dbeta);
        let len = cache.geom.kernel_len();
        cache.geom.backward(
            &cache.input,
            self.weights(p),
            &dz,
            &mut grad[self.weight..self.weight + len],
        )
    }
}

fn run_branch(
    units: &[ConvUnit],
    p: &[f64],
    buf: &[f64],
    x: &Act,
    train: bool,
    stats: &mut Vec<(usize, usize, ChannelStats)>,
) -> Result<(Act, Vec<UnitCache>)> {
    let mut caches = Vec::new();
    let mut cur: Option<Act> = None;
    for u in units {
        let (out, cache) = u.forward(p, buf, cur.as_ref().unwrap_or(x), train, stats)?;
        caches.extend(cache);
        cur = Some(out);
    }
    Ok((cur.expect("branches are non-empty"), caches))
}

fn backward_branch(
    units: &[ConvUnit],
    p: &[f64],
    caches: &[UnitCache],
    mut dy: Vec<f64>,
    grad: &mut [f64],
) -> Vec<f64> {
    for (u, c) in units.iter().zip(caches).rev() {
        dy = u.backward(p, c, dy, grad);
    }
    dy
}

/// Concatenates same-sized activations along channels.
fn concat(parts: &[Act]) -> Act {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|a| a.c).sum();
    let rows = n * h * w;
    let mut data = Vec::with_capacity(rows * c);
    for r in 0..rows {
        for a in parts {
            data.extend_from_slice(&a.data[r * a.c..(r + 1) * a.c]);
        }
    }
    Act { n, h, w, c, data }
}

fn split(d: &[f64], widths: &[usize]) -> Vec<Vec<f64>> {
    let total: usize = widths.iter().sum();
    let rows = d.len() / total;
    let mut parts: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for row in d.chunks_exact(total) {
        let mut at = 0;
        for (part, w) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&row[at..at + w]);
            at += w;
        }
    }
    parts
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Block {
    branches: Vec<Vec<ConvUnit>>,
    project: ConvUnit,
}

struct BlockCache {
    branches: Vec<Vec<UnitCache>>,
    widths: Vec<usize>,
    project: UnitCache,
    output: Vec<f64>,
}

impl Block {
    fn forward(
        &self,
        p: &[f64],
        buf: &[f64],
        x: &Act,
        train: bool,
        stats: &mut Vec<(usize, usize, ChannelStats)>,
    ) -> Result<(Act, Option<BlockCache>)> {
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for units in &self.branches {
            let (out, cache) = run_branch(units, p, buf, x, train, stats)?;
            outs.push(out);
            caches.push(cache);
        }
        let widths = outs.iter().map(|a| a.c).collect();
        let (residual, project) = self.project.forward(p, buf, &concat(&outs), train, stats)?;
        if residual.data.len() != x.data.len() {
            return Err(Error::DimensionMismatch(format!(
                "residual branch output {}x{}x{} does not match input {}x{}x{}",
                residual.h, residual.w, residual.c, x.h, x.w, x.c
            )));
        }
        let data: Vec<f64> = x
            .data
            .iter()
            .zip(&residual.data)
            .map(|(a, b)| (a + b).max(0.0))
            .collect();
        let cache = project.map(|project| BlockCache {
            branches: caches,
            widths,
            project,
            output: data.clone(),
        });
        Ok((
            Act {
                n: x.n,
                h: x.h,
                w: x.w,
                c: x.c,
                data,
            },
            cache,
        ))
    }

    fn backward(&self, p: &[f64], cache: &BlockCache, mut dy: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
        for (d, o) in dy.iter_mut().zip(&cache.output) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
        let dconcat = self.project.backward(p, &cache.project, dy.clone(), grad);
        let mut dx = dy;
        for ((units, caches), part) in self
            .branches
            .iter()
            .zip(&cache.branches)
            .zip(split(&dconcat, &cache.widths))
        {
            let d = backward_branch(units, p, caches, part, grad);
            for (a, b) in dx.iter_mut().zip(d) {
                *a += b;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Reduction {
    branches: Vec<Vec<ConvUnit>>,
}

struct ReductionCache {
    branches: Vec<Vec<UnitCache>>,
    widths: Vec<usize>,
}

impl Reduction {
    fn forward(
        &self,
        p: &[f64],
        buf: &[f64],
        x: &Act,
        train: bool,
        stats: &mut Vec<(usize, usize, ChannelStats)>,
    ) -> Result<(Act, ReductionCache)> {
        let mut outs = Vec::new();
        let mut caches = Vec::new();
        for units in &self.branches {
            let (out, cache) = run_branch(units, p, buf, x, train, stats)?;
            outs.push(out);
            caches.push(cache);
        }
        let widths = outs.iter().map(|a| a.c).collect();
        Ok((
            concat(&outs),
            ReductionCache {
                branches: caches,
                widths,
            },
        ))
    }

    fn backward(&self, p: &[f64], cache: &ReductionCache, dy: &[f64], input_len: usize, grad: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; input_len];
        for ((units, caches), part) in self.branches.iter().zip(&cache.branches).zip(split(dy, &cache.widths)) {
            let d = backward_branch(units, p, caches, part, grad);
            for (a, b) in dx.iter_mut().zip(d) {
                *a += b;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
}

impl Dense {
    /// `y = x W + b` for each of the `n` rows of `x`; `W` is `inputs × outputs`.
    fn forward(&self, p: &[f64], x: &[f64], n: usize) -> Vec<f64> {
        let w = &p[self.weight..self.weight + self.inputs * self.outputs];
        let b = &p[self.bias..self.bias + self.outputs];
        let mut y = Vec::with_capacity(n * self.outputs);
        for row in x.chunks_exact(self.inputs) {
            let mut out = b.to_vec();
            for (xi, wr) in row.iter().zip(w.chunks_exact(self.outputs)) {
                for (o, wv) in out.iter_mut().zip(wr) {
                    *o += xi * wv;
                }
            }
            y.extend(out);
        }
        y
    }

    fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let w = &p[self.weight..self.weight + self.inputs * self.outputs];
        let mut dx = Vec::with_capacity(x.len());
        for (row, drow) in x.chunks_exact(self.inputs).zip(dy.chunks_exact(self.outputs)) {
            for (o, d) in drow.iter().enumerate() {
                grad[self.bias + o] += d;
            }
            for (i, (xi, wr)) in row.iter().zip(w.chunks_exact(self.outputs)).enumerate() {
                let gw = &mut grad[self.weight + i * self.outputs..self.weight + (i + 1) * self.outputs];
                for (g, d) in gw.iter_mut().zip(drow) {
                    *g += xi * d;
                }
                dx.push(wr.iter().zip(drow).map(|(a, b)| a * b).sum());
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stage {
    reduction: Option<Reduction>,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layout {
    stem: Vec<ConvUnit>,
    stages: Vec<Stage>,
    fc1: Dense,
    fc2: Dense,
    param_len: usize,
    buffer_len: usize,
    groups: Vec<ParamGroup>,
    buffer_groups: Vec<ParamGroup>,
}

impl Layout {
    fn build(config: &ExtractorConfig) -> Result<Self> {
        let (_, _, final_channels) = config.validate()?;
        let mut alloc = Alloc::default();
        let (stem, mut channels) = alloc.branch("stem", config.input_channels, &config.stem);
        let mut stages = Vec::new();
        for (s, spec) in config.stages.iter().enumerate() {
            let reduction = spec.reduction.as_ref().map(|red| {
                let mut width = 0;
                let branches = red
                    .branches
                    .iter()
                    .enumerate()
                    .map(|(b, convs)| {
                        let (units, out) = alloc.branch(&format!("stage{s}.reduction.branch{b}"), channels, convs);
                        width += out;
                        units
                    })
                    .collect();
                channels = width;
                Reduction { branches }
            });
            let blocks = spec
                .blocks
                .iter()
                .enumerate()
                .map(|(b, blk)| alloc.block(&format!("stage{s}.block{b}"), channels, blk))
                .collect();
            stages.push(Stage { reduction, blocks });
        }
        debug_assert_eq!(channels, final_channels);
        let fc1 = alloc.dense("fc1", channels, config.feature_dim);
        let fc2 = alloc.dense("fc2", config.feature_dim, config.num_classes);
        Ok(Layout {
            stem,
            stages,
            fc1,
            fc2,
            param_len: alloc.params,
            buffer_len: alloc.buffers,
            groups: alloc.groups,
            buffer_groups: alloc.buffer_groups,
        })
    }
}

/// Output of a forward pass: class logits (`N × K`) and the activations of
/// the first fully-connected layer (`N × feature_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    /// Mean softmax cross-entropy over the batch.
    pub loss: f64,
    /// Same layout as [`ExtractorModel::params`].
    pub gradients: Vec<f64>,
    pub batch_stats: BatchStats,
    pub logits: Tensor,
}

struct StageCache {
    reduction: Option<(ReductionCache, usize)>,
    blocks: Vec<BlockCache>,
}

struct NetCache {
    stem: Vec<UnitCache>,
    stages: Vec<StageCache>,
    trunk_dims: (usize, usize, usize, usize),
    pooled: Vec<f64>,
    mask: Vec<f64>,
    dropped: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "StoredExtractor", into = "StoredExtractor")]
pub struct ExtractorModel {
    config: ExtractorConfig,
    params: Vec<f64>,
    buffers: Vec<f64>,
    layout: Layout,
}

/// Serialized form: the layout is rebuilt from the configuration.
#[derive(Serialize, Deserialize)]
struct StoredExtractor {
    config: ExtractorConfig,
    params: Vec<f64>,
    buffers: Vec<f64>,
}

impl TryFrom<StoredExtractor> for ExtractorModel {
    type Error = Error;

    fn try_from(s: StoredExtractor) -> Result<Self> {
        ExtractorModel::from_parts(s.config, s.params, s.buffers)
    }
}

impl From<ExtractorModel> for StoredExtractor {
    fn from(m: ExtractorModel) -> Self {
        StoredExtractor {
            config: m.config,
            params: m.params,
            buffers: m.buffers,
        }
    }
}

impl ExtractorModel {
    /// Randomly initialized model, seeded from `config.seed`.
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        let layout = Layout::build(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = initialize(&layout.groups, layout.param_len, &mut rng);
        let buffers = initialize(&layout.buffer_groups, layout.buffer_len, &mut rng);
        Ok(ExtractorModel {
            config,
            params,
            buffers,
            layout,
        })
    }

    pub fn from_parts(config: ExtractorConfig, params: Vec<f64>, buffers: Vec<f64>) -> Result<Self> {
        let layout = Layout::build(&config)?;
        if params.len() != layout.param_len || buffers.len() != layout.buffer_len {
            return Err(Error::DimensionMismatch(format!(
                "extractor needs {} parameters and {} statistics, got {} and {}",
                layout.param_len,
                layout.buffer_len,
                params.len(),
                buffers.len()
            )));
        }
        crate::error::ensure_finite(&params, || "extractor parameters".into())?;
        crate::error::ensure_finite(&buffers, || "extractor running statistics".into())?;
        Ok(ExtractorModel {
            config,
            params,
            buffers,
            layout,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Normalization running statistics.
    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn param_groups(&self) -> &[ParamGroup] {
        &self.layout.groups
    }

    /// Group owning parameter index `i`.
    pub fn group_of(&self, i: usize) -> Option<&ParamGroup> {
        self.layout.groups.iter().find(|g| g.range().contains(&i))
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Zeroes the class-logit layer's weights and bias.
    pub fn zero_output_layer(&mut self) {
        let fc2 = &self.layout.fc2;
        self.params[fc2.weight..fc2.weight + fc2.inputs * fc2.outputs].fill(0.0);
        self.params[fc2.bias..fc2.bias + fc2.outputs].fill(0.0);
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let (n, h, w, c) = batch.dims4()?;
        let cfg = &self.config;
        if (h, w, c) != (cfg.input_height, cfg.input_width, cfg.input_channels) {
            return Err(Error::DimensionMismatch(format!(
                "batch frames are {h}x{w}x{c}, model expects {}x{}x{}",
                cfg.input_height, cfg.input_width, cfg.input_channels
            )));
        }
        Ok(n)
    }

    fn run(
        &self,
        batch: &Tensor,
        mode: Mode,
        stats: &mut Vec<(usize, usize, ChannelStats)>,
    ) -> Result<(Vec<f64>, Vec<f64>, Option<NetCache>)> {
        let n = self.check_batch(batch)?;
        let train = matches!(mode, Mode::Training { .. });
        let (p, buf) = (&self.params[..], &self.buffers[..]);
        let cfg = &self.config;
        let input = Act {
            n,
            h: cfg.input_height,
            w: cfg.input_width,
            c: cfg.input_channels,
            data: batch.data().to_vec(),
        };

        let (mut x, stem) = if self.layout.stem.is_empty() {
            (input, Vec::new())
        } else {
            run_branch(&self.layout.stem, p, buf, &input, train, stats)?
        };
        let mut stage_caches = Vec::new();
        for stage in &self.layout.stages {
            let reduction = match &stage.reduction {
                Some(red) => {
                    let input_len = x.data.len();
                    let (out, cache) = red.forward(p, buf, &x, train, stats)?;
                    x = out;
                    Some((cache, input_len))
                }
                None => None,
            };
            let mut blocks = Vec::new();
            for block in &stage.blocks {
                let (out, cache) = block.forward(p, buf, &x, train, stats)?;
                x = out;
                blocks.extend(cache);
            }
            stage_caches.push(StageCache { reduction, blocks });
        }

        // Global average pooling.
        let spatial = x.h * x.w;
        let mut pooled = vec![0.0; n * x.c];
        for (b, out) in pooled.chunks_exact_mut(x.c).enumerate() {
            for px in x.data[b * spatial * x.c..(b + 1) * spatial * x.c].chunks_exact(x.c) {
                for (o, v) in out.iter_mut().zip(px) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= spatial as f64);
        }

        let mask: Vec<f64> = match mode {
            Mode::Training { dropout_seed } if cfg.dropout_rate > 0.0 => {
                let keep = 1.0 - cfg.dropout_rate;
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                (0..pooled.len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            }
            _ => Vec::new(),
        };
        let dropped: Vec<f64> = if mask.is_empty() {
            pooled.clone()
        } else {
            pooled.iter().zip(&mask).map(|(a, m)| a * m).collect()
        };

        let mut hidden = self.layout.fc1.forward(p, &dropped, n);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = self.layout.fc2.forward(p, &hidden, n);

        let cache = train.then(|| NetCache {
            stem,
            stages: stage_caches,
            trunk_dims: (n, x.h, x.w, x.c),
            pooled,
            mask,
            dropped,
            hidden: hidden.clone(),
        });
        Ok((logits, hidden, cache))
    }

    /// Forward pass over an `N × H × W × C` batch. Training mode uses batch
    /// statistics but does not modify the running statistics.
    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let (logits, hidden, _) = self.run(batch, mode, &mut Vec::new())?;
        let n = batch.shape()[0];
        let out = ForwardOutput {
            logits: Tensor::from_parts_unchecked(vec![n, self.config.num_classes], logits),
            features: Tensor::from_parts_unchecked(vec![n, self.config.feature_dim], hidden),
        };
        crate::error::ensure_finite(out.logits.data(), || "extractor logits".into())?;
        crate::error::ensure_finite(out.features.data(), || "extractor features".into())?;
        Ok(out)
    }

    /// Training-mode forward and backward pass for mean softmax
    /// cross-entropy against `labels`.
    pub fn backward(&self, batch: &Tensor, labels: &[usize], dropout_seed: u64) -> Result<BackwardOutput> {
        let n = self.check_batch(batch)?;
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        let k = self.config.num_classes;
        if let Some(&label) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange {
                label,
                num_labels: k,
                context: "extractor batch".into(),
            });
        }
        let mut stats = Vec::new();
        let (logits, _, cache) = self.run(batch, Mode::Training { dropout_seed }, &mut stats)?;
        let cache = cache.expect("training mode keeps caches");
        let (loss, dlogits) = softmax_cross_entropy(&logits, k, labels);

        let p = &self.params[..];
        let mut grad = vec![0.0; self.params.len()];
        let mut dhidden = self.layout.fc2.backward(p, &cache.hidden, &dlogits, &mut grad);
        for (d, h) in dhidden.iter_mut().zip(&cache.hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        let mut dpooled = self.layout.fc1.backward(p, &cache.dropped, &dhidden, &mut grad);
        if !cache.mask.is_empty() {
            for (d, m) in dpooled.iter_mut().zip(&cache.mask) {
                *d *= m;
            }
        }
        debug_assert_eq!(dpooled.len(), cache.pooled.len());

        let (_, h, w, c) = cache.trunk_dims;
        let spatial = (h * w) as f64;
        let mut dx = Vec::with_capacity(n * h * w * c);
        for drow in dpooled.chunks_exact(c) {
            for _ in 0..h * w {
                dx.extend(drow.iter().map(|v| v / spatial));
            }
        }

        for (stage, sc) in self.layout.stages.iter().zip(&cache.stages).rev() {
            for (block, bc) in stage.blocks.iter().zip(&sc.blocks).rev() {
                dx = block.backward(p, bc, dx, &mut grad);
            }
            if let (Some(red), Some((rc, input_len))) = (&stage.reduction, &sc.reduction) {
                dx = red.backward(p, rc, &dx, *input_len, &mut grad);
            }
        }
        backward_branch(&self.layout.stem, p, &cache.stem, dx, &mut grad);

        if !loss.is_finite() {
            return Err(Error::NonFinite("extractor loss".into()));
        }
        Ok(BackwardOutput {
            loss,
            gradients: grad,
            batch_stats: BatchStats(stats),
            logits: Tensor::from_parts_unchecked(vec![n, k], logits),
        })
    }

    pub fn apply_batch_stats(&mut self, stats: &BatchStats) {
        for (mean, var, s) in &stats.0 {
            let c = s.mean.len();
            let (lo, hi) = self.buffers.split_at_mut(*var);
            norm::update_running(&mut lo[*mean..*mean + c], &mut hi[..c], s);
        }
    }
}

/// Mean softmax cross-entropy over rows of `logits` and its gradient.
pub fn softmax_cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for ((row, g), &y) in logits.chunks_exact(k).zip(grad.chunks_exact_mut(k)).zip(labels) {
        let lse = crate::crf::log_sum_exp(row);
        loss += lse - row[y];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = ((row[j] - lse).exp() - f64::from(u8::from(j == y))) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// A residual unit with its own parameters: `ReLU(x + F(x))` where `F` is
/// the projected concatenation of the branches.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    channels: usize,
    block: Block,
    params: Vec<f64>,
    buffers: Vec<f64>,
    groups: Vec<ParamGroup>,
}

impl ResidualBlock {
    pub fn new(channels: usize, spec: &BlockSpec, seed: u64) -> Result<Self> {
        let cfg = ExtractorConfig {
            input_height: 1,
            input_width: 1,
            input_channels: channels,
            num_classes: 2,
            feature_dim: 1,
            stem: Vec::new(),
            stages: vec![crate::extractor::config::StageSpec {
                reduction: None,
                blocks: vec![spec.clone()],
            }],
            dropout_rate: 0.0,
            seed,
        };
        cfg.validate()?;
        let mut alloc = Alloc::default();
        let block = alloc.block("block", channels, spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = initialize(&alloc.groups, alloc.params, &mut rng);
        let buffers = initialize(&alloc.buffer_groups, alloc.buffers, &mut rng);
        Ok(ResidualBlock {
            channels,
            block,
            params,
            buffers,
            groups: alloc.groups,
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    fn act(&self, input: &Tensor) -> Result<Act> {
        let (n, h, w, c) = input.dims4()?;
        if c != self.channels {
            return Err(Error::DimensionMismatch(format!(
                "block expects {} channels, input has {c}",
                self.channels
            )));
        }
        Ok(Act {
            n,
            h,
            w,
            c,
            data: input.data().to_vec(),
        })
    }

    pub fn forward(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = self.act(input)?;
        let train = matches!(mode, Mode::Training { .. });
        let (y, _) = self
            .block
            .forward(&self.params, &self.buffers, &x, train, &mut Vec::new())?;
        Tensor::new(input.shape().to_vec(), y.data)
    }

    /// Training-mode gradients of `Σ upstream ⊙ forward(input)` with respect
    /// to the input and to the block parameters.
    pub fn backward(&self, input: &Tensor, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.act(input)?;
        if upstream.len() != x.data.len() {
            return Err(Error::DimensionMismatch("upstream gradient size".into()));
        }
        let (_, cache) = self
            .block
            .forward(&self.params, &self.buffers, &x, true, &mut Vec::new())?;
        let cache = cache.expect("training mode keeps caches");
        let mut grad = vec![0.0; self.params.len()];
        let dx = self.block.backward(&self.params, &cache, upstream.to_vec(), &mut grad);
        Ok((dx, grad))
    }
}

/// `ReLU(x + F(x))` for a standalone block.
pub fn residual_block(input: &Tensor, block: &ResidualBlock, mode: Mode) -> Result<Tensor> {
    block.forward(input, mode)
}

/// Which activations become the per-frame observation vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// Output of the first fully-connected layer (after ReLU).
    #[default]
    Penultimate,
    /// Class logits.
    Logits,
}

/// Frames pushed through the network per inference call.
const EXTRACT_CHUNK: usize = 64;

impl ExtractorModel {
    pub fn tap_dim(&self, tap: FeatureTap) -> usize {
        match tap {
            FeatureTap::Penultimate => self.config.feature_dim,
            FeatureTap::Logits => self.config.num_classes,
        }
    }

    /// Inference-mode activations at `tap` for each frame of a
    /// `T × H × W × C` sequence. Frames are processed independently, so the
    /// result does not depend on how the sequence is chunked.
    pub fn extract_features(&self, frames: &Tensor, tap: FeatureTap) -> Result<crate::crf::ObservationSequence> {
        let t = self.check_batch(frames)?;
        if t == 0 {
            return Err(Error::DimensionMismatch("empty frame sequence".into()));
        }
        let frame_len = self.config.input_len();
        let shape = frames.shape();
        let mut data = Vec::with_capacity(t * self.tap_dim(tap));
        for chunk in frames.data().chunks(EXTRACT_CHUNK * frame_len) {
            let n = chunk.len() / frame_len;
            let batch = Tensor::from_parts_unchecked(vec![n, shape[1], shape[2], shape[3]], chunk.to_vec());
            let out = self.forward(&batch, Mode::Inference)?;
            data.extend_from_slice(match tap {
                FeatureTap::Penultimate => out.features.data(),
                FeatureTap::Logits => out.logits.data(),
            });
        }
        crate::crf::ObservationSequence::new(t, self.tap_dim(tap), data)
    }
}

/// Inference-mode per-frame features; see [`ExtractorModel::extract_features`].
pub fn extract_features(
    model: &ExtractorModel,
    frames: &Tensor,
    tap: FeatureTap,
) -> Result<crate::crf::ObservationSequence> {
    model.extract_features(frames, tap)
}

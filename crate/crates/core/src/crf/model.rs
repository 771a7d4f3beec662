use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Ordered inventory of class names. Label `i` is `names[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "a label set needs at least 2 labels, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate label name `{name}`")));
            }
        }
        Ok(LabelSet { names })
    }

    /// `neutral` followed by the basic expressions, then generic names.
    pub fn expressions(k: usize) -> Result<Self> {
        const NAMES: [&str; 7] = [
            "neutral",
            "anger",
            "disgust",
            "fear",
            "happiness",
            "sadness",
            "surprise",
        ];
        Self::new((0..k).map(|i| match NAMES.get(i) {
            Some(n) => (*n).to_string(),
            None => format!("class{i}"),
        }))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        LabelSet::new(names)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(set: LabelSet) -> Self {
        set.names
    }
}

/// `T × d` feature matrix, one row per frame, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSequence {
    len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ObservationSequence {
    pub fn new(len: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::DimensionMismatch(format!(
                "observation sequence must be at least 1 x 1, got {len} x {dim}"
            )));
        }
        if data.len() != len * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot form a {len} x {dim} observation matrix",
                data.len()
            )));
        }
        ensure_finite(&data, || "observation sequence".into())?;
        Ok(ObservationSequence { len, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "ragged observation rows ({} vs {dim})",
                bad.len()
            )));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Per-frame label indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, num_labels: usize) -> Result<()> {
        match self.0.iter().find(|&&y| y >= num_labels) {
            Some(&label) => Err(Error::LabelOutOfRange {
                label,
                num_labels,
                context: "label sequence".into(),
            }),
            None => Ok(()),
        }
    }
}

impl From<Vec<usize>> for LabelSequence {
    fn from(labels: Vec<usize>) -> Self {
        LabelSequence(labels)
    }
}

/// Linear-chain CRF parameters over dense emission features.
///
/// The parameter vector is laid out as
///
/// 1. state weights, `K × d`, row-major (row `y` scores label `y`),
/// 2. state biases, `K`,
/// 3. transition weights, `K × K`, row-major (entry `[prev, next]`).
///
/// Gradients returned by [`objective_gradient`](crate::crf::objective_gradient)
/// use the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfModel {
    labels: LabelSet,
    dim: usize,
    params: Vec<f64>,
}

impl CrfModel {
    pub fn zeros(labels: LabelSet, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch(
                "CRF feature dimension must be positive".into(),
            ));
        }
        let n = Self::param_count(labels.len(), dim);
        Ok(CrfModel {
            labels,
            dim,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(labels: LabelSet, dim: usize, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(labels.len(), dim);
        if dim == 0 || params.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "CRF with {} labels and dimension {dim} needs {expected} parameters, got {}",
                labels.len(),
                params.len()
            )));
        }
        ensure_finite(&params, || "CRF parameters".into())?;
        Ok(CrfModel { labels, dim, params })
    }

    /// Builds a model from its three blocks; `state_weights` is `K × d`
    /// row-major, `transitions` is `K × K` row-major.
    pub fn from_parts(
        labels: LabelSet,
        dim: usize,
        state_weights: &[f64],
        state_bias: &[f64],
        transitions: &[f64],
    ) -> Result<Self> {
        let k = labels.len();
        if state_weights.len() != k * dim || state_bias.len() != k || transitions.len() != k * k {
            return Err(Error::DimensionMismatch(format!(
                "CRF blocks have lengths {}/{}/{}, expected {}/{}/{}",
                state_weights.len(),
                state_bias.len(),
                transitions.len(),
                k * dim,
                k,
                k * k
            )));
        }
        let params = [state_weights, state_bias, transitions].concat();
        Self::from_params(labels, dim, params)
    }

    pub fn param_count(num_labels: usize, dim: usize) -> usize {
        num_labels * dim + num_labels + num_labels * num_labels
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.labels.clone(), self.dim, params)
    }

    pub(crate) fn bias_offset(&self) -> usize {
        self.num_labels() * self.dim
    }

    pub(crate) fn transition_offset(&self) -> usize {
        self.bias_offset() + self.num_labels()
    }

    pub fn state_weights(&self, label: usize) -> &[f64] {
        &self.params[label * self.dim..(label + 1) * self.dim]
    }

    pub fn state_bias(&self, label: usize) -> f64 {
        self.params[self.bias_offset() + label]
    }

    pub fn transition(&self, prev: usize, next: usize) -> f64 {
        self.params[self.transition_offset() + prev * self.num_labels() + next]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.params[self.transition_offset()..]
    }

    pub fn transitions_mut(&mut self) -> &mut [f64] {
        let off = self.transition_offset();
        &mut self.params[off..]
    }

    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|v| v * v).sum()
    }

    pub(crate) fn check_observations(&self, obs: &ObservationSequence) -> Result<()> {
        if obs.dim() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "CRF expects {}-dimensional features, observation has {}",
                self.dim,
                obs.dim()
            )));
        }
        ensure_finite(&self.params, || "CRF parameters".into())
    }

    pub(crate) fn check_labels(&self, obs: &ObservationSequence, labels: &LabelSequence) -> Result<()> {
        if labels.len() != obs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} frames",
                labels.len(),
                obs.len()
            )));
        }
        labels.validate(self.num_labels())
    }

    /// `T × K` matrix of per-frame state scores `W[y]·x_t + b[y]`.
    pub fn state_scores(&self, obs: &ObservationSequence) -> Vec<f64> {
        let k = self.num_labels();
        let mut scores = Vec::with_capacity(obs.len() * k);
        for row in obs.rows() {
            for y in 0..k {
                let w = self.state_weights(y);
                let dot: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
                scores.push(dot + self.state_bias(y));
            }
        }
        scores
    }
}

/// Posterior marginals from forward-backward.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub num_labels: usize,
    /// `T × K`, row-major.
    pub node: Vec<f64>,
    /// `(T-1) × K × K`; entry `[t][i][j]` is `P(y_t = i, y_{t+1} = j)`.
    pub edge: Vec<f64>,
    pub log_z: f64,
}

impl Marginals {
    pub fn len(&self) -> usize {
        self.node.len() / self.num_labels
    }

    pub fn is_empty(&self) -> bool {
        self.node.is_empty()
    }

    pub fn node_row(&self, t: usize) -> &[f64] {
        let k = self.num_labels;
        &self.node[t * k..(t + 1) * k]
    }

    pub fn edge_slice(&self, t: usize) -> &[f64] {
        let kk = self.num_labels * self.num_labels;
        &self.edge[t * kk..(t + 1) * kk]
    }
}

/// Training pairs plus the Gaussian prior variance. `sigma2 = ∞` disables
/// the penalty.
#[derive(Debug, Clone)]
pub struct RegularizedDataset {
    items: Vec<(ObservationSequence, LabelSequence)>,
    sigma2: f64,
}

impl RegularizedDataset {
    pub fn new(items: Vec<(ObservationSequence, LabelSequence)>, sigma2: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidConfig("CRF training data is empty".into()));
        }
        if sigma2.is_nan() || sigma2 <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "prior variance must be positive, got {sigma2}"
            )));
        }
        let dim = items[0].0.dim();
        for (i, (obs, labels)) in items.iter().enumerate() {
            if obs.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {i} has dimension {}, expected {dim}",
                    obs.dim()
                )));
            }
            if obs.len() != labels.len() {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {i} has {} frames but {} labels",
                    obs.len(),
                    labels.len()
                )));
            }
        }
        Ok(RegularizedDataset { items, sigma2 })
    }

    pub fn items(&self) -> &[(ObservationSequence, LabelSequence)] {
        &self.items
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn dim(&self) -> usize {
        self.items[0].0.dim()
    }

    pub fn with_sigma2(&self, sigma2: f64) -> Result<Self> {
        Self::new(self.items.clone(), sigma2)
    }

    pub fn total_frames(&self) -> usize {
        self.items.iter().map(|(o, _)| o.len()).sum()
    }
}

//! Exact inference for the linear chain: scoring, the forward recursion for
//! `log Z`, forward-backward marginals and Viterbi decoding. Everything runs
//! in log space.

use crate::crf::model::{CrfModel, LabelSequence, Marginals, ObservationSequence};
use crate::error::{Error, Result};

/// `log Σ exp(v)` with max shift. Returns `-∞` for an empty or all `-∞` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Unnormalized log score of one labeling: state terms for every frame plus
/// one transition term per adjacent pair.
pub fn sequence_score(model: &CrfModel, obs: &ObservationSequence, labels: &LabelSequence) -> Result<f64> {
    model.check_observations(obs)?;
    model.check_labels(obs, labels)?;
    let y = labels.as_slice();
    let mut score = 0.0;
    for (t, row) in obs.rows().enumerate() {
        let w = model.state_weights(y[t]);
        score += w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + model.state_bias(y[t]);
        if t > 0 {
            score += model.transition(y[t - 1], y[t]);
        }
    }
    if score.is_finite() {
        Ok(score)
    } else {
        Err(Error::NonFinite("sequence score".into()))
    }
}

/// Log forward messages, `T × K`.
fn forward_messages(model: &CrfModel, states: &[f64], len: usize) -> Vec<f64> {
    let k = model.num_labels();
    let trans = model.transitions();
    let mut alpha = vec![0.0; len * k];
    alpha[..k].copy_from_slice(&states[..k]);
    let mut buf = vec![0.0; k];
    for t in 1..len {
        let (prev, cur) = alpha.split_at_mut(t * k);
        let prev = &prev[(t - 1) * k..];
        for j in 0..k {
            for i in 0..k {
                buf[i] = prev[i] + trans[i * k + j];
            }
            cur[j] = log_sum_exp(&buf) + states[t * k + j];
        }
    }
    alpha
}

/// Log backward messages, `T × K`; the last row is zero.
fn backward_messages(model: &CrfModel, states: &[f64], len: usize) -> Vec<f64> {
    let k = model.num_labels();
    let trans = model.transitions();
    let mut beta = vec![0.0; len * k];
    let mut buf = vec![0.0; k];
    for t in (0..len.saturating_sub(1)).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * k);
        let cur = &mut cur[t * k..];
        let next = &next[..k];
        for i in 0..k {
            for j in 0..k {
                buf[j] = trans[i * k + j] + states[(t + 1) * k + j] + next[j];
            }
            cur[i] = log_sum_exp(&buf);
        }
    }
    beta
}

fn finite_or(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

pub fn log_partition(model: &CrfModel, obs: &ObservationSequence) -> Result<f64> {
    model.check_observations(obs)?;
    let states = model.state_scores(obs);
    let alpha = forward_messages(model, &states, obs.len());
    let k = model.num_labels();
    finite_or(log_sum_exp(&alpha[(obs.len() - 1) * k..]), "log partition")
}

pub fn forward_backward(model: &CrfModel, obs: &ObservationSequence) -> Result<Marginals> {
    model.check_observations(obs)?;
    let k = model.num_labels();
    let len = obs.len();
    let states = model.state_scores(obs);
    let alpha = forward_messages(model, &states, len);
    let beta = backward_messages(model, &states, len);
    let log_z = finite_or(log_sum_exp(&alpha[(len - 1) * k..]), "log partition")?;

    let node = alpha.iter().zip(&beta).map(|(a, b)| (a + b - log_z).exp()).collect();

    let trans = model.transitions();
    let mut edge = Vec::with_capacity(len.saturating_sub(1) * k * k);
    for t in 0..len.saturating_sub(1) {
        for i in 0..k {
            let a = alpha[t * k + i];
            for j in 0..k {
                let lp = a + trans[i * k + j] + states[(t + 1) * k + j] + beta[(t + 1) * k + j];
                edge.push((lp - log_z).exp());
            }
        }
    }

    Ok(Marginals {
        num_labels: k,
        node,
        edge,
        log_z,
    })
}

/// Highest-scoring labeling. Among equally scored labelings the
/// lexicographically smallest one is returned.
///
/// Best suffix scores are computed right to left so that the path can be
/// read off left to right, taking the smallest optimal label at each frame.
pub fn viterbi_decode(model: &CrfModel, obs: &ObservationSequence) -> Result<LabelSequence> {
    model.check_observations(obs)?;
    let k = model.num_labels();
    let len = obs.len();
    let states = model.state_scores(obs);
    let trans = model.transitions();

    // suffix[t][y]: best score of frames t.. given y_t = y, including y's state score.
    let mut suffix = vec![0.0; len * k];
    suffix[(len - 1) * k..].copy_from_slice(&states[(len - 1) * k..]);
    for t in (0..len - 1).rev() {
        for i in 0..k {
            let best = (0..k)
                .map(|j| trans[i * k + j] + suffix[(t + 1) * k + j])
                .fold(f64::NEG_INFINITY, f64::max);
            suffix[t * k + i] = states[t * k + i] + best;
        }
    }
    if suffix[..k].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Viterbi scores".into()));
    }

    let mut path = Vec::with_capacity(len);
    path.push(argmax_first(&suffix[..k]));
    for t in 1..len {
        let prev = path[t - 1];
        let cand: Vec<f64> = (0..k).map(|j| trans[prev * k + j] + suffix[t * k + j]).collect();
        path.push(argmax_first(&cand));
    }
    Ok(LabelSequence(path))
}

/// Index of the maximum, smallest index on ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

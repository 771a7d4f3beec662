//! Independent reference computations used by the test suites and by
//! `seqcrf check`: exhaustive enumeration over all `K^T` labelings and
//! central finite differences. None of these routines share code with the
//! dynamic programs they verify beyond [`sequence_score`].

use crate::crf::{sequence_score, CrfModel, LabelSequence, ObservationSequence};
use crate::error::Result;

/// All labelings of length `len` over `k` labels, in lexicographic order.
pub fn all_labelings(k: usize, len: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = k.pow(len as u32);
    (0..total).map(move |mut code| {
        let mut y = vec![0; len];
        for slot in y.iter_mut().rev() {
            *slot = code % k;
            code /= k;
        }
        y
    })
}

/// Enumerated node marginals, edge marginals, log partition and argmax.
#[derive(Debug, Clone)]
pub struct Enumeration {
    pub log_z: f64,
    pub node: Vec<f64>,
    pub edge: Vec<f64>,
    /// Lexicographically first labeling with the maximal score.
    pub best: Vec<usize>,
    pub best_score: f64,
}

pub fn enumerate(model: &CrfModel, obs: &ObservationSequence) -> Result<Enumeration> {
    let k = model.num_labels();
    let len = obs.len();
    let mut scored = Vec::with_capacity(k.pow(len as u32));
    let mut best: Option<(Vec<usize>, f64)> = None;
    for y in all_labelings(k, len) {
        let s = sequence_score(model, obs, &LabelSequence(y.clone()))?;
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((y.clone(), s));
        }
        scored.push((y, s));
    }
    let max = scored.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scored.iter().map(|(_, s)| (s - max).exp()).sum();
    let log_z = max + z.ln();

    let mut node = vec![0.0; len * k];
    let mut edge = vec![0.0; len.saturating_sub(1) * k * k];
    for (y, s) in &scored {
        let p = (s - log_z).exp();
        for t in 0..len {
            node[t * k + y[t]] += p;
            if t + 1 < len {
                edge[t * k * k + y[t] * k + y[t + 1]] += p;
            }
        }
    }
    let (best, best_score) = best.expect("at least one labeling");
    Ok(Enumeration {
        log_z,
        node,
        edge,
        best,
        best_score,
    })
}

/// Log-likelihood of `labels` by enumeration: `score − log Σ exp(score)`.
pub fn enumerated_log_likelihood(model: &CrfModel, obs: &ObservationSequence, labels: &LabelSequence) -> Result<f64> {
    let e = enumerate(model, obs)?;
    Ok(sequence_score(model, obs, labels)? - e.log_z)
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst entrywise discrepancy between two gradients.
///
/// Each entry's error is `|a − n| / max(|a|, |n|)`; entries whose absolute
/// difference is at most `abs_floor` count as zero error, since for
/// near-zero gradient components the finite-difference roundoff dominates
/// any relative measure.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let diff = (a - n).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Relative difference `|a − b| / max(|a|, |b|, 1e-300)`.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labelings_are_lexicographic_and_complete() {
        let all: Vec<_> = all_labelings(2, 3).collect();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0], vec![0, 0, 0]);
        assert_eq!(all[1], vec![0, 0, 1]);
        assert_eq!(all[7], vec![1, 1, 1]);
    }

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|x| Ok(x[0].powi(3) + 2.0 * x[1]), &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[1e-12], &[3e-12], 1e-9), 0.0);
        assert!((max_relative_error(&[1.0], &[1.1], 1e-9) - 0.1 / 1.1).abs() < 1e-12);
    }
}

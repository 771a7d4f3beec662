use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ChannelStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Training-mode normalization over rows of a `[M][C]` buffer.
pub(crate) fn forward_train(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, NormCache, ChannelStats) {
    let m = x.len() / channels;
    let mut mean = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        for c in 0..channels {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();

    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ((xr, hr), yr) in x
        .chunks_exact(channels)
        .zip(xhat.chunks_exact_mut(channels))
        .zip(y.chunks_exact_mut(channels))
    {
        for c in 0..channels {
            hr[c] = (xr[c] - mean[c]) * inv_std[c];
            yr[c] = gamma[c] * hr[c] + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std }, ChannelStats { mean, var, count: m })
}

pub(crate) fn forward_infer(
    x: &[f64],
    channels: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Vec<f64> {
    let scale: Vec<f64> = (0..channels)
        .map(|c| gamma[c] / (running_var[c] + BN_EPSILON).sqrt())
        .collect();
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(channels).zip(y.chunks_exact_mut(channels)) {
        for c in 0..channels {
            yr[c] = (xr[c] - running_mean[c]) * scale[c] + beta[c];
        }
    }
    y
}

/// Backward of training-mode normalization. Accumulates into `dgamma` and
/// `dbeta`; returns the input gradient.
pub(crate) fn backward_train(
    dy: &[f64],
    cache: &NormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let channels = gamma.len();
    let m = (dy.len() / channels) as f64;
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for (dr, hr) in dy.chunks_exact(channels).zip(cache.xhat.chunks_exact(channels)) {
        for c in 0..channels {
            sum_dy[c] += dr[c];
            sum_dy_xhat[c] += dr[c] * hr[c];
        }
    }
    for c in 0..channels {
        dgamma[c] += sum_dy_xhat[c];
        dbeta[c] += sum_dy[c];
    }
    let mut dx = vec![0.0; dy.len()];
    for ((dr, hr), xr) in dy
        .chunks_exact(channels)
        .zip(cache.xhat.chunks_exact(channels))
        .zip(dx.chunks_exact_mut(channels))
    {
        for c in 0..channels {
            let k = gamma[c] * cache.inv_std[c] / m;
            xr[c] = k * (m * dr[c] - sum_dy[c] - hr[c] * sum_dy_xhat[c]);
        }
    }
    dx
}

/// Folds batch statistics into running statistics. The running variance
/// uses the unbiased batch estimate.
pub(crate) fn update_running(running_mean: &mut [f64], running_var: &mut [f64], stats: &ChannelStats) {
    let correction = if stats.count > 1 {
        stats.count as f64 / (stats.count - 1) as f64
    } else {
        1.0
    };
    for c in 0..running_mean.len() {
        running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * stats.mean[c];
        running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * stats.var[c] * correction;
    }
}

/// Scale, shift and running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-channel normalization of the last axis of `input`.
///
/// In training mode the batch statistics are used (ε = 1e-5) and folded
/// into the running statistics; in inference mode the running statistics
/// are used and `params` is left untouched.
pub fn batch_norm(input: &Tensor, params: &mut BatchNormParams, training: bool) -> Result<Tensor> {
    let channels = *input.shape().last().expect("tensor shapes are non-empty");
    let p = &*params;
    if [p.beta.len(), p.running_mean.len(), p.running_var.len()]
        .iter()
        .any(|&l| l != p.gamma.len())
        || p.gamma.len() != channels
    {
        return Err(Error::DimensionMismatch(format!(
            "normalization parameters for {} channels applied to {channels} channels",
            p.gamma.len()
        )));
    }
    let y = if training {
        if input.len() / channels == 0 {
            return Err(Error::DimensionMismatch("empty batch in training mode".into()));
        }
        let (y, _, stats) = forward_train(input.data(), channels, &params.gamma, &params.beta);
        update_running(&mut params.running_mean, &mut params.running_var, &stats);
        y
    } else {
        forward_infer(
            input.data(),
            channels,
            &params.gamma,
            &params.beta,
            &params.running_mean,
            &params.running_var,
        )
    };
    Tensor::new(input.shape().to_vec(), y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_input_passes_through() {
        // Per-channel mean 0, population variance 1.
        let x = vec![1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0];
        let t = Tensor::new(vec![4, 2], x.clone()).unwrap();
        let mut p = BatchNormParams::identity(2);
        let y = batch_norm(&t, &mut p, true).unwrap();
        for (a, b) in y.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let t = Tensor::new(vec![3, 1], vec![2.5; 3]).unwrap();
        let mut p = BatchNormParams::identity(1);
        p.beta[0] = 0.75;
        p.gamma[0] = 3.0;
        let y = batch_norm(&t, &mut p, true).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.75));
    }

    #[test]
    fn random_batch_has_target_moments() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 7919 % 101) as f64).sin() * 3.0 + 1.5).collect();
        let t = Tensor::new(vec![100, 2], x).unwrap();
        let mut p = BatchNormParams::identity(2);
        p.gamma = vec![2.0, 0.5];
        p.beta = vec![-1.0, 4.0];
        let y = batch_norm(&t, &mut p, true).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = y.data().iter().skip(c).step_by(2).copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!((mean - [-1.0, 4.0][c]).abs() < 1e-4);
            assert!((var - [4.0, 0.25][c]).abs() < 1e-4);
        }
    }

    #[test]
    fn training_updates_running_stats_and_inference_uses_them() {
        let t = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut p = BatchNormParams::identity(1);
        batch_norm(&t, &mut p, true).unwrap();
        assert!((p.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((p.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        let frozen = p.clone();
        let y = batch_norm(&t, &mut p, false).unwrap();
        assert_eq!(p, frozen);
        let expected = (1.0 - 0.2) / (1.1f64 + BN_EPSILON).sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn mismatched_channels_rejected() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(batch_norm(&t, &mut BatchNormParams::identity(2), false).is_err());
    }
}

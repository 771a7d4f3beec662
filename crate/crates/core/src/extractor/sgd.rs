use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::extractor::config::SgdConfig;
use crate::extractor::network::ExtractorModel;
use crate::extractor::tensor::Tensor;

/// Momentum buffer, one entry per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub Vec<f64>);

impl Velocity {
    pub fn zeros(model: &ExtractorModel) -> Self {
        Velocity(vec![0.0; model.params().len()])
    }
}

/// `v ← μ·v − lr·(g + λ·w)`, then `w ← w + v`, elementwise.
pub fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *w);
        *w += *v;
    }
}

/// One momentum-SGD update of the model's trainable parameters at the
/// learning rate scheduled for `iteration`. Normalization running
/// statistics are not parameters and are never decayed.
pub fn sgd_step(
    model: &mut ExtractorModel,
    gradients: &[f64],
    velocity: &mut Velocity,
    config: &SgdConfig,
    iteration: usize,
) -> Result<()> {
    let n = model.params().len();
    if gradients.len() != n || velocity.0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} parameters, {} gradients, {} velocities",
            gradients.len(),
            velocity.0.len()
        )));
    }
    if let Some(i) = gradients.iter().position(|g| !g.is_finite()) {
        let layer = model.group_of(i).map_or("<unknown>", |g| g.name.as_str());
        return Err(Error::NonFinite(format!("gradient of layer {layer}")));
    }
    sgd_update(
        model.params_mut(),
        gradients,
        &mut velocity.0,
        config.lr_at(iteration),
        config.momentum,
        config.weight_decay,
    );
    Ok(())
}

/// Per-iteration record of extractor training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractorTrainLog {
    pub losses: Vec<f64>,
}

/// Minibatch training on `frames` (`N × H × W × C`) with frame labels.
/// Batches are drawn without replacement from a reshuffled order each pass,
/// all randomness coming from `seed`.
pub fn train_extractor(
    model: &mut ExtractorModel,
    frames: &Tensor,
    labels: &[usize],
    config: &SgdConfig,
    seed: u64,
) -> Result<ExtractorTrainLog> {
    config.validate()?;
    let (n, h, w, c) = frames.dims4()?;
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {n} frames",
            labels.len()
        )));
    }
    let frame_len = h * w * c;
    let batch = config.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut velocity = Velocity::zeros(model);
    let mut log = ExtractorTrainLog::default();

    for it in 0..config.total_iterations {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mut data = Vec::with_capacity(batch * frame_len);
        for &i in &idx {
            data.extend_from_slice(&frames.data()[i * frame_len..(i + 1) * frame_len]);
        }
        let x = Tensor::new(vec![batch, h, w, c], data)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let out = model.backward(&x, &y, rng.random())?;
        sgd_step(model, &out.gradients, &mut velocity, config, it)?;
        model.apply_batch_stats(&out.batch_stats);
        if it % 50 == 0 {
            debug!("extractor iteration {it}: loss {:.5}", out.loss);
        }
        log.losses.push(out.loss);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_update() {
        let (mut w, mut v) = ([1.0], [0.0]);
        sgd_update(&mut w, &[1.0], &mut v, 0.01, 0.9, 0.0001);
        assert!((v[0] + 0.010001).abs() < 1e-15);
        assert!((w[0] - 0.989999).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut w, mut v) = ([0.3, -2.0], [0.0, 0.0]);
        sgd_update(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(w, [0.3, -2.0]);
    }
}

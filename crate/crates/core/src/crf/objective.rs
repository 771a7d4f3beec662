use crate::crf::inference::{forward_backward, log_partition, sequence_score};
use crate::crf::model::{CrfModel, RegularizedDataset};
use crate::error::{Error, Result};

fn check_dataset(model: &CrfModel, data: &RegularizedDataset) -> Result<()> {
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "CRF dimension {} does not match data dimension {}",
            model.dim(),
            data.dim()
        )));
    }
    Ok(())
}

fn penalty(model: &CrfModel, sigma2: f64) -> f64 {
    if sigma2.is_infinite() {
        0.0
    } else {
        model.squared_norm() / (2.0 * sigma2)
    }
}

/// Penalized conditional log-likelihood
/// `Σ_j [score(y_j | x_j) − log Z(x_j)] − ‖θ‖² / (2σ²)`.
pub fn objective(model: &CrfModel, data: &RegularizedDataset) -> Result<f64> {
    check_dataset(model, data)?;
    let mut total = 0.0;
    for (obs, labels) in data.items() {
        total += sequence_score(model, obs, labels)? - log_partition(model, obs)?;
    }
    Ok(total - penalty(model, data.sigma2()))
}

/// Gradient of [`objective`] in the model's flattening order.
pub fn objective_gradient(model: &CrfModel, data: &RegularizedDataset) -> Result<Vec<f64>> {
    objective_and_gradient(model, data).map(|(_, g)| g)
}

/// Objective and gradient from one forward-backward pass per sequence.
///
/// The gradient is empirical feature counts minus their expectation under
/// the model, minus `θ / σ²`. Sequences are accumulated in dataset order.
pub fn objective_and_gradient(model: &CrfModel, data: &RegularizedDataset) -> Result<(f64, Vec<f64>)> {
    check_dataset(model, data)?;
    let k = model.num_labels();
    let d = model.dim();
    let bias_off = model.bias_offset();
    let trans_off = model.transition_offset();
    let mut grad = vec![0.0; model.params().len()];
    let mut value = 0.0;

    for (obs, labels) in data.items() {
        model.check_labels(obs, labels)?;
        let marg = forward_backward(model, obs)?;
        value += sequence_score(model, obs, labels)? - marg.log_z;

        let y = labels.as_slice();
        for (t, row) in obs.rows().enumerate() {
            let probs = marg.node_row(t);
            for label in 0..k {
                let coef = f64::from(u8::from(y[t] == label)) - probs[label];
                if coef != 0.0 {
                    let w = &mut grad[label * d..(label + 1) * d];
                    for (g, x) in w.iter_mut().zip(row) {
                        *g += coef * x;
                    }
                    grad[bias_off + label] += coef;
                }
            }
        }
        for t in 0..obs.len().saturating_sub(1) {
            grad[trans_off + y[t] * k + y[t + 1]] += 1.0;
            for (g, p) in grad[trans_off..].iter_mut().zip(marg.edge_slice(t)) {
                *g -= p;
            }
        }
    }

    let sigma2 = data.sigma2();
    if sigma2.is_finite() {
        for (g, theta) in grad.iter_mut().zip(model.params()) {
            *g -= theta / sigma2;
        }
    }
    value -= penalty(model, sigma2);

    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("CRF objective".into()));
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::model::{LabelSequence, LabelSet, ObservationSequence};

    fn obs(rows: &[f64], d: usize) -> ObservationSequence {
        ObservationSequence::new(rows.len() / d, d, rows.to_vec()).unwrap()
    }

    #[test]
    fn zero_model_objective_is_minus_frames_log_k() {
        let k = 3;
        let model = CrfModel::zeros(LabelSet::expressions(k).unwrap(), 2).unwrap();
        let items = vec![
            (obs(&[1.0, 2.0, 3.0, 4.0], 2), LabelSequence(vec![0, 2])),
            (obs(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2), LabelSequence(vec![1, 1, 0])),
        ];
        let expected = -5.0 * (k as f64).ln();
        let unreg = RegularizedDataset::new(items.clone(), f64::INFINITY).unwrap();
        assert!((objective(&model, &unreg).unwrap() - expected).abs() < 1e-12);
        let reg = RegularizedDataset::new(items, 1.0).unwrap();
        assert!((objective(&model, &reg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn balanced_transitions_give_zero_transition_gradient() {
        // Every label appears equally often at each position and every ordered
        // pair appears once per position.
        let k = 2;
        let model = CrfModel::zeros(LabelSet::expressions(k).unwrap(), 1).unwrap();
        let items: Vec<_> = [[0, 0], [0, 1], [1, 0], [1, 1]]
            .iter()
            .map(|y| (obs(&[0.5, -0.5], 1), LabelSequence(y.to_vec())))
            .collect();
        let data = RegularizedDataset::new(items, f64::INFINITY).unwrap();
        let g = objective_gradient(&model, &data).unwrap();
        for v in &g[model.transition_offset()..] {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let model = CrfModel::zeros(LabelSet::expressions(2).unwrap(), 3).unwrap();
        let data = RegularizedDataset::new(vec![(obs(&[1.0, 2.0], 2), LabelSequence(vec![0]))], 1.0).unwrap();
        assert!(matches!(objective(&model, &data), Err(Error::DimensionMismatch(_))));
        assert!(objective_gradient(&model, &data).is_err());
    }

    #[test]
    fn combined_value_matches_objective() {
        let labels = LabelSet::expressions(3).unwrap();
        let params: Vec<f64> = (0..CrfModel::param_count(3, 2))
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();
        let model = CrfModel::from_params(labels, 2, params).unwrap();
        let data = RegularizedDataset::new(
            vec![(obs(&[0.1, 0.2, -0.3, 0.4, 1.5, -2.0], 2), LabelSequence(vec![2, 0, 1]))],
            10.0,
        )
        .unwrap();
        let (v, _) = objective_and_gradient(&model, &data).unwrap();
        assert!((v - objective(&model, &data).unwrap()).abs() < 1e-12);
    }
}

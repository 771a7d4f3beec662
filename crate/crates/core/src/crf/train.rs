use crate::crf::model::{CrfModel, RegularizedDataset};
use crate::crf::objective::objective_and_gradient;
use crate::error::Result;
use crate::optim::{lbfgs_minimize, OptimConfig, OptimReport};

/// Fits the CRF on the whole dataset at once by minimizing the negated
/// penalized log-likelihood. The report's objective values are in the
/// minimized (negated) form.
pub fn train_crf(data: &RegularizedDataset, init: &CrfModel, config: &OptimConfig) -> Result<(CrfModel, OptimReport)> {
    let negated = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let model = init.with_params(theta.to_vec())?;
        let (value, grad) = objective_and_gradient(&model, data)?;
        Ok((-value, grad.into_iter().map(|g| -g).collect()))
    };
    let (theta, report) = lbfgs_minimize(negated, init.params(), config)?;
    Ok((init.with_params(theta)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf::{objective, viterbi_decode, LabelSequence, LabelSet, ObservationSequence};

    /// Label is 1 exactly when the single feature is positive.
    fn separable() -> Vec<(ObservationSequence, LabelSequence)> {
        let raw = [
            [0.9, -0.4, -1.2, 0.3, 0.7],
            [-0.8, -0.2, 0.5, 1.1, -0.6],
            [0.2, 0.6, -0.9, -0.3, 1.4],
            [-1.5, 0.8, 0.4, -0.7, -0.1],
        ];
        raw.iter()
            .map(|row| {
                let labels = row.iter().map(|&v| usize::from(v > 0.0)).collect();
                (
                    ObservationSequence::new(5, 1, row.to_vec()).unwrap(),
                    LabelSequence(labels),
                )
            })
            .collect()
    }

    fn zero_init() -> CrfModel {
        CrfModel::zeros(LabelSet::new(["neg", "pos"]).unwrap(), 1).unwrap()
    }

    #[test]
    fn separable_data_is_reproduced() {
        let data = RegularizedDataset::new(separable(), 100.0).unwrap();
        let (model, report) = train_crf(&data, &zero_init(), &OptimConfig::default()).unwrap();
        for w in report.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        for (obs, labels) in data.items() {
            assert_eq!(&viterbi_decode(&model, obs).unwrap(), labels);
        }
        assert!(objective(&model, &data).unwrap() >= objective(&zero_init(), &data).unwrap());
    }

    #[test]
    fn trained_optimum_is_a_fixed_point() {
        let data = RegularizedDataset::new(separable(), 10.0).unwrap();
        let config = OptimConfig::default();
        let (model, _) = train_crf(&data, &zero_init(), &config).unwrap();
        let (again, report) = train_crf(&data, &model, &config).unwrap();
        assert!(report.iterations_used <= 1);
        let before = objective(&model, &data).unwrap();
        let after = objective(&again, &data).unwrap();
        assert!((after - before).abs() <= 1e-9);
    }

    #[test]
    fn strong_prior_shrinks_parameters() {
        let loose = RegularizedDataset::new(separable(), 100.0).unwrap();
        let tight = loose.with_sigma2(1e-4).unwrap();
        let config = OptimConfig::default();
        let (a, _) = train_crf(&loose, &zero_init(), &config).unwrap();
        let (b, _) = train_crf(&tight, &zero_init(), &config).unwrap();
        assert!(b.squared_norm() <= a.squared_norm());
    }
}

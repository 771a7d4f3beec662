//! Randomized self-checks against the brute-force and finite-difference
//! references in [`crate::oracle`], as run by `seqcrf check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crf::{
    forward_backward, log_partition, objective, objective_gradient, viterbi_decode, CrfModel, LabelSequence, LabelSet,
    ObservationSequence, RegularizedDataset,
};
use crate::error::Result;
use crate::extractor::{ExtractorConfig, ExtractorModel, Tensor};
use crate::oracle::{central_difference, enumerate, max_relative_error, relative_difference};

/// Relative tolerance for quantities computed two exact ways.
pub const ORACLE_TOLERANCE: f64 = 1e-9;
/// Relative tolerance for analytic versus central-difference gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
/// Gradient entries differing by less than this are treated as equal.
pub const GRADIENT_ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    /// Largest relative discrepancy seen.
    pub worst: f64,
    /// Largest absolute discrepancy seen.
    pub worst_absolute: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        SuiteReport {
            name: name.into(),
            instances: 0,
            worst: 0.0,
            worst_absolute: 0.0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record_gradient(&mut self, instance: usize, analytic: &[f64], numeric: &[f64]) {
        let abs = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        self.worst_absolute = self.worst_absolute.max(abs);
        let err = max_relative_error(analytic, numeric, GRADIENT_ABS_FLOOR);
        self.record(instance, "gradient", err, GRADIENT_TOLERANCE);
    }

    fn record(&mut self, instance: usize, what: &str, err: f64, tol: f64) {
        self.worst = self.worst.max(err);
        if !(err <= tol) {
            self.failures
                .push(format!("instance {instance}: {what} off by {err:e}"));
        }
    }
}

/// A random CRF with `k` labels over `d` features. Every fourth model draws
/// integer weights from {−1, 0, 1} so that ties occur.
pub fn random_model(rng: &mut ChaCha8Rng, k: usize, d: usize, integer: bool) -> CrfModel {
    let labels = LabelSet::new((0..k).map(|i| format!("y{i}"))).expect("k >= 2");
    let n = CrfModel::param_count(k, d);
    let params = (0..n)
        .map(|_| {
            if integer {
                f64::from(rng.random_range(-1i32..=1))
            } else {
                rng.random_range(-1.5..1.5)
            }
        })
        .collect();
    CrfModel::from_params(labels, d, params).expect("valid parameters")
}

pub fn random_observations(rng: &mut ChaCha8Rng, t: usize, d: usize, integer: bool) -> ObservationSequence {
    let data = (0..t * d)
        .map(|_| {
            if integer {
                f64::from(rng.random_range(0i32..=1))
            } else {
                rng.random_range(-2.0..2.0)
            }
        })
        .collect();
    ObservationSequence::new(t, d, data).expect("finite observations")
}

/// Forward-backward and Viterbi against enumeration of all `K^T` labelings
/// on random instances with `K ≤ 4`, `T ≤ 6`, `d ≤ 3`.
pub fn oracle_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("crf-oracle");
    for i in 0..instances {
        let (k, t, d) = (
            rng.random_range(2..=4),
            rng.random_range(1..=6),
            rng.random_range(1..=3),
        );
        let integer = i % 4 == 3;
        let model = random_model(&mut rng, k, d, integer);
        let obs = random_observations(&mut rng, t, d, integer);
        let brute = enumerate(&model, &obs)?;
        report.record(
            i,
            "log partition",
            relative_difference(log_partition(&model, &obs)?, brute.log_z),
            ORACLE_TOLERANCE,
        );
        let m = forward_backward(&model, &obs)?;
        report.record(
            i,
            "node marginals",
            max_relative_error(&m.node, &brute.node, 1e-15),
            ORACLE_TOLERANCE,
        );
        report.record(
            i,
            "edge marginals",
            max_relative_error(&m.edge, &brute.edge, 1e-15),
            ORACLE_TOLERANCE,
        );
        let decoded = viterbi_decode(&model, &obs)?;
        if decoded.0 != brute.best {
            report.failures.push(format!(
                "instance {i}: viterbi {:?} != brute force {:?}",
                decoded.0, brute.best
            ));
        }
        report.instances += 1;
    }
    Ok(report)
}

/// Random regularized datasets of one to three sequences.
pub fn random_dataset(rng: &mut ChaCha8Rng, k: usize, d: usize) -> RegularizedDataset {
    let n = rng.random_range(1..=3);
    let items = (0..n)
        .map(|_| {
            let t = rng.random_range(1..=5);
            let obs = random_observations(rng, t, d, false);
            let labels = LabelSequence((0..t).map(|_| rng.random_range(0..k)).collect());
            (obs, labels)
        })
        .collect();
    let sigma2 = if rng.random_bool(0.25) {
        f64::INFINITY
    } else {
        rng.random_range(0.5..20.0)
    };
    RegularizedDataset::new(items, sigma2).expect("valid dataset")
}

/// Analytic objective gradient against central differences.
pub fn crf_gradient_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("crf-gradient");
    for i in 0..instances {
        let (k, d) = (rng.random_range(2..=4), rng.random_range(1..=3));
        let model = random_model(&mut rng, k, d, false);
        let data = random_dataset(&mut rng, k, d);
        let analytic = objective_gradient(&model, &data)?;
        let numeric = central_difference(
            |p| objective(&model.with_params(p.to_vec())?, &data),
            model.params(),
            FD_STEP,
        )?;
        report.record_gradient(i, &analytic, &numeric);
        report.instances += 1;
    }
    Ok(report)
}

/// Full-parameter gradient of the tiny extractor's loss against central
/// differences, on `instances` random batches and initializations.
pub fn extractor_gradient_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::new("extractor-gradient");
    for i in 0..instances {
        let mut cfg = ExtractorConfig::tiny(3);
        cfg.seed = rng.random();
        let model = ExtractorModel::new(cfg)?;
        let n = 3;
        let batch = Tensor::new(
            vec![n, 8, 8, 1],
            (0..n * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )?;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let analytic = model.backward(&batch, &labels, 0)?.gradients;
        let numeric = central_difference(
            |p| {
                let m = ExtractorModel::from_parts(model.config().clone(), p.to_vec(), model.buffers().to_vec())?;
                Ok(m.backward(&batch, &labels, 0)?.loss)
            },
            model.params(),
            FD_STEP,
        )?;
        report.record_gradient(i, &analytic, &numeric);
        report.instances += 1;
    }
    Ok(report)
}

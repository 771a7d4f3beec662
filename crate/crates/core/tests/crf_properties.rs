use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqcrf::checks::{random_dataset, random_model, random_observations};
use seqcrf::crf::{
    forward_backward, log_partition, log_sum_exp, objective, objective_gradient, sequence_score, viterbi_decode,
    CrfModel, LabelSequence, LabelSet, ObservationSequence, RegularizedDataset,
};
use seqcrf::oracle::{all_labelings, central_difference, enumerate, max_relative_error, relative_difference};

fn instance(seed: u64, k: usize, t: usize, d: usize, integer: bool) -> (CrfModel, ObservationSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&mut rng, k, d, integer);
    let obs = random_observations(&mut rng, t, d, integer);
    (model, obs)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Adds `c` to every state score of frame `t` through a constant feature
/// column: the model gains one input dimension whose weight is 1 for every
/// label, and the observation carries `c` in that column at frame `t` only.
fn shift_frame(model: &CrfModel, obs: &ObservationSequence, t: usize, c: f64) -> (CrfModel, ObservationSequence) {
    let (k, d) = (model.num_labels(), model.dim());
    let mut params = Vec::new();
    for y in 0..k {
        params.extend_from_slice(model.state_weights(y));
        params.push(1.0);
    }
    params.extend((0..k).map(|y| model.state_bias(y)));
    params.extend_from_slice(model.transitions());
    let shifted = CrfModel::from_params(model.labels().clone(), d + 1, params).unwrap();
    let rows: Vec<Vec<f64>> = obs
        .rows()
        .enumerate()
        .map(|(s, r)| {
            let mut row = r.to_vec();
            row.push(if s == t { c } else { 0.0 });
            row
        })
        .collect();
    (shifted, ObservationSequence::from_rows(&rows).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inference_matches_enumeration(
        seed in any::<u64>(), k in 2usize..=4, t in 1usize..=6, d in 1usize..=3, integer in any::<bool>()
    ) {
        let (model, obs) = instance(seed, k, t, d, integer);
        let brute = enumerate(&model, &obs).unwrap();
        prop_assert!(relative_difference(log_partition(&model, &obs).unwrap(), brute.log_z) <= 1e-9);
        let m = forward_backward(&model, &obs).unwrap();
        prop_assert!(max_relative_error(&m.node, &brute.node, 1e-15) <= 1e-9);
        prop_assert!(max_relative_error(&m.edge, &brute.edge, 1e-15) <= 1e-9);
        prop_assert_eq!(viterbi_decode(&model, &obs).unwrap().0, brute.best);
    }

    #[test]
    fn marginals_are_normalized_and_consistent(
        seed in any::<u64>(), k in 2usize..=5, t in 1usize..=12, d in 1usize..=4
    ) {
        let (model, obs) = instance(seed, k, t, d, false);
        let m = forward_backward(&model, &obs).unwrap();
        prop_assert!(relative_difference(m.log_z, log_partition(&model, &obs).unwrap()) <= 1e-12);
        for s in 0..t {
            prop_assert!((m.node_row(s).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for s in 0..t - 1 {
            let e = m.edge_slice(s);
            prop_assert!((e.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for i in 0..k {
                let row: f64 = (0..k).map(|j| e[i * k + j]).sum();
                let col: f64 = (0..k).map(|j| e[j * k + i]).sum();
                prop_assert!((row - m.node_row(s)[i]).abs() <= 1e-9);
                prop_assert!((col - m.node_row(s + 1)[i]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn partition_bounds_every_labeling(seed in any::<u64>(), k in 2usize..=3, t in 1usize..=5) {
        let (model, obs) = instance(seed, k, t, 2, false);
        let log_z = log_partition(&model, &obs).unwrap();
        for y in all_labelings(k, t) {
            prop_assert!(sequence_score(&model, &obs, &LabelSequence(y)).unwrap() <= log_z);
        }
    }

    #[test]
    fn shifting_one_frame_moves_only_log_z(
        seed in any::<u64>(), k in 2usize..=4, t in 1usize..=6, d in 1usize..=3, c in -20.0f64..20.0,
        integer in any::<bool>()
    ) {
        let (model, obs) = instance(seed, k, t, d, integer);
        let frame = (seed as usize) % t;
        let (m2, o2) = shift_frame(&model, &obs, frame, c);
        let a = forward_backward(&model, &obs).unwrap();
        let b = forward_backward(&m2, &o2).unwrap();
        prop_assert!((b.log_z - a.log_z - c).abs() <= 1e-9 * (1.0 + a.log_z.abs() + c.abs()));
        prop_assert!(close(&a.node, &b.node, 1e-9));
        prop_assert!(close(&a.edge, &b.edge, 1e-9));
        // Integer weights and an integer shift keep ties exact.
        if !integer || c.fract() == 0.0 {
            prop_assert_eq!(viterbi_decode(&model, &obs).unwrap(), viterbi_decode(&m2, &o2).unwrap());
        }
    }

    #[test]
    fn zero_transitions_factorize(seed in any::<u64>(), k in 2usize..=5, t in 1usize..=10, d in 1usize..=4) {
        let (mut model, obs) = instance(seed, k, t, d, false);
        model.transitions_mut().fill(0.0);
        let scores = model.state_scores(&obs);
        let m = forward_backward(&model, &obs).unwrap();
        let mut total = 0.0;
        let mut argmax = Vec::new();
        for s in 0..t {
            let row = &scores[s * k..(s + 1) * k];
            let lse = log_sum_exp(row);
            total += lse;
            for y in 0..k {
                prop_assert!(relative_difference(m.node_row(s)[y], (row[y] - lse).exp()) <= 1e-12);
            }
            argmax.push(seqcrf::crf::argmax_first(row));
        }
        prop_assert!(relative_difference(m.log_z, total) <= 1e-12);
        prop_assert_eq!(viterbi_decode(&model, &obs).unwrap().0, argmax);
    }

    #[test]
    fn objective_gradient_matches_finite_differences(seed in any::<u64>(), k in 2usize..=4, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, k, d, false);
        let data = random_dataset(&mut rng, k, d);
        let analytic = objective_gradient(&model, &data).unwrap();
        let numeric = central_difference(
            |p| objective(&model.with_params(p.to_vec())?, &data),
            model.params(),
            1e-5,
        ).unwrap();
        prop_assert!(max_relative_error(&analytic, &numeric, 1e-9) <= 1e-6);
    }

    #[test]
    fn objective_is_midpoint_concave(seed in any::<u64>(), k in 2usize..=4, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_model(&mut rng, k, d, false);
        let b = random_model(&mut rng, k, d, false);
        let data = random_dataset(&mut rng, k, d);
        let (fa, fb) = (objective(&a, &data).unwrap(), objective(&b, &data).unwrap());
        for _ in 0..10 {
            let lambda: f64 = rng.random_range(0.0..1.0);
            let p = a.params().iter().zip(b.params()).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
            let f = objective(&a.with_params(p).unwrap(), &data).unwrap();
            prop_assert!(f >= fa.min(fb) - 1e-12);
        }
    }

    #[test]
    fn unregularized_log_likelihood_is_nonpositive(seed in any::<u64>(), k in 2usize..=4, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, k, d, false);
        let data = random_dataset(&mut rng, k, d).with_sigma2(f64::INFINITY).unwrap();
        prop_assert!(objective(&model, &data).unwrap() <= 0.0);
    }

    #[test]
    fn prior_enters_the_gradient_separably(
        seed in any::<u64>(), s1 in 0.1f64..50.0, s2 in 0.1f64..50.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, 3, 2, false);
        let data = random_dataset(&mut rng, 3, 2);
        let ga = objective_gradient(&model, &data.with_sigma2(s1).unwrap()).unwrap();
        let gb = objective_gradient(&model, &data.with_sigma2(s2).unwrap()).unwrap();
        for ((x, y), theta) in gb.iter().zip(&ga).zip(model.params()) {
            let expected = theta * (1.0 / s1 - 1.0 / s2);
            prop_assert!((x - y - expected).abs() <= 1e-12 * (1.0 + x.abs() + y.abs()));
        }
    }

    #[test]
    fn score_is_linear_in_parameters(seed in any::<u64>(), t in 1usize..=6, alpha in -3.0f64..3.0) {
        let (a, obs) = instance(seed, 3, t, 2, false);
        let (b, _) = instance(seed.wrapping_add(1), 3, t, 2, false);
        let labels = LabelSequence((0..t).map(|s| (seed as usize + s) % 3).collect());
        let sum = a.params().iter().zip(b.params()).map(|(x, y)| x + alpha * y).collect();
        let combined = a.with_params(sum).unwrap();
        let lhs = sequence_score(&combined, &obs, &labels).unwrap();
        let rhs = sequence_score(&a, &obs, &labels).unwrap() + alpha * sequence_score(&b, &obs, &labels).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }
}

#[test]
fn objective_matches_enumerated_likelihood_minus_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let model = random_model(&mut rng, 3, 2, false);
    let obs = random_observations(&mut rng, 4, 2, false);
    let labels = LabelSequence(vec![2, 0, 0, 1]);
    let data = RegularizedDataset::new(vec![(obs.clone(), labels.clone())], 10.0).unwrap();
    let expected =
        seqcrf::oracle::enumerated_log_likelihood(&model, &obs, &labels).unwrap() - model.squared_norm() / 20.0;
    assert!(relative_difference(objective(&model, &data).unwrap(), expected) <= 1e-9);
}

#[test]
fn zero_model_objective_ignores_the_prior() {
    let labels = LabelSet::new(["a", "b", "c", "d"]).unwrap();
    let model = CrfModel::zeros(labels, 2).unwrap();
    let items = vec![
        (
            ObservationSequence::new(3, 2, vec![0.5; 6]).unwrap(),
            LabelSequence(vec![0, 1, 2]),
        ),
        (
            ObservationSequence::new(1, 2, vec![-1.0, 2.0]).unwrap(),
            LabelSequence(vec![3]),
        ),
    ];
    let expected = -4.0 * 4f64.ln();
    for sigma2 in [f64::INFINITY, 1.0] {
        let data = RegularizedDataset::new(items.clone(), sigma2).unwrap();
        assert!(relative_difference(objective(&model, &data).unwrap(), expected) <= 1e-12);
    }
}

#[test]
fn partition_of_zero_model_on_eighty_one_labelings() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_model(&mut rng, 3, 2, false);
    let obs = random_observations(&mut rng, 4, 2, false);
    let brute: Vec<f64> = all_labelings(3, 4)
        .map(|y| sequence_score(&model, &obs, &LabelSequence(y)).unwrap())
        .collect();
    assert_eq!(brute.len(), 81);
    assert!(relative_difference(log_partition(&model, &obs).unwrap(), log_sum_exp(&brute)) <= 1e-9);
}

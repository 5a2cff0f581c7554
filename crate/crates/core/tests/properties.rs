//! Property suites for the numerical core: partition coverage, attack
//! involutions, aggregation invariants, and training oracles.

use std::collections::BTreeSet;

use proptest::prelude::*;

use fedsim::aggregation;
use fedsim::attacks;
use fedsim::data;
use fedsim::model::{Dataset, LossOracle, ParamVector};

fn small_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-100i32..=100i32, d).prop_map(|v| {
        v.into_iter().map(|x| f64::from(x) / 10.0).collect()
    })
}

fn update_set() -> impl Strategy<Value = Vec<ParamVector>> {
    (1usize..9, 1usize..6).prop_flat_map(|(n, d)| {
        proptest::collection::vec(small_vec(d).prop_map(ParamVector::from_vec), n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_disjoint_exhaustive(
        n_clients in 1usize..12,
        alpha in prop_oneof![Just(0.1), Just(0.5), Just(1.0), Just(10.0)],
        seed in 0u64..1000,
    ) {
        let source = data::synthetic_blobs(300, 2, 4, 1.0, 7).unwrap();
        let plan = data::dirichlet_partition(&source, n_clients, alpha, seed).unwrap();
        let mut seen = BTreeSet::new();
        for assignment in &plan.assignments {
            prop_assert!(!assignment.is_empty());
            for &i in assignment {
                prop_assert!(seen.insert(i));
            }
        }
        prop_assert_eq!(seen.len(), source.len());

        // Class-count rows sum to the source's per-class totals.
        let counts = plan.class_counts(&source);
        for class in 0..4 {
            let total: usize = counts.iter().map(|row| row[class]).sum();
            let expected = source.labels().iter().filter(|&&l| l == class).count();
            prop_assert_eq!(total, expected);
        }
    }

    #[test]
    fn flip_labels_is_an_involution(
        labels in proptest::collection::vec(0usize..7, 1..40),
    ) {
        let n = labels.len();
        let dataset = Dataset::new(vec![0.25; n], 1, labels, 7).unwrap();
        let once = attacks::flip_labels(&dataset);
        let twice = attacks::flip_labels(&once);
        prop_assert_eq!(&twice, &dataset);

        // Histogram mirrored about (C-1)/2.
        let histogram = |d: &Dataset| {
            let mut h = vec![0usize; 7];
            for &l in d.labels() {
                h[l] += 1;
            }
            h
        };
        let orig = histogram(&dataset);
        let flipped = histogram(&once);
        for c in 0..7 {
            prop_assert_eq!(orig[c], flipped[6 - c]);
        }
    }

    #[test]
    fn aggregation_rules_respect_client_permutation(updates in update_set()) {
        let n = updates.len();
        let mut permuted = updates.clone();
        permuted.reverse();

        let median_a = aggregation::coordinate_median(&updates).unwrap();
        let median_b = aggregation::coordinate_median(&permuted).unwrap();
        prop_assert_eq!(median_a.as_slice(), median_b.as_slice());

        if n >= 3 {
            let trimmed_a = aggregation::trimmed_mean(&updates, 0.34).unwrap();
            let trimmed_b = aggregation::trimmed_mean(&permuted, 0.34).unwrap();
            prop_assert_eq!(trimmed_a.as_slice(), trimmed_b.as_slice());
        }
    }

    #[test]
    fn greedy_never_loses_to_best_individual(updates in update_set()) {
        let center = vec![0.3; updates[0].len()];
        let server_loss = |x: &ParamVector| -> f64 {
            x.iter().zip(&center).map(|(v, c)| (v - c) * (v - c)).sum()
        };
        let n = updates.len();
        let (out, trace) = aggregation::fed_greed(&updates, server_loss, n).unwrap();
        let min_v = updates.iter().map(&server_loss).fold(f64::INFINITY, f64::min);
        prop_assert!(server_loss(&out) <= min_v + 1e-12);

        // Sorted losses are non-decreasing and accepted candidates strictly
        // improve.
        for w in trace.losses.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for w in trace.candidate_losses.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        prop_assert_eq!(trace.candidate_losses.len(), trace.stop_j);
    }

    #[test]
    fn loss_scales_as_a_mean(
        duplications in 2usize..5,
        seed in 0u64..100,
    ) {
        let oracle = LossOracle::softmax_regression(3, 4, 0.0);
        let dataset = data::synthetic_blobs(12, 3, 4, 2.0, seed).unwrap();
        let params = ParamVector::from_vec(
            (0..oracle.param_dim()).map(|i| ((i * 37 + seed as usize) % 13) as f64 / 13.0 - 0.5).collect(),
        );
        let base = oracle.loss(&params, &dataset).unwrap();
        let indices: Vec<usize> = (0..12).cycle().take(12 * duplications).collect();
        let duplicated = oracle.loss(&params, &dataset.subset(&indices)).unwrap();
        prop_assert!((base - duplicated).abs() < 1e-12);
    }

    #[test]
    fn corrupt_preserves_honest_updates(
        round in 0usize..30,
        activation in 0usize..20,
        malicious in proptest::collection::btree_set(0usize..6, 0..5),
        seed in 0u64..50,
    ) {
        let updates: Vec<ParamVector> = (0..6)
            .map(|i| ParamVector::from_vec(vec![i as f64, -(i as f64)]))
            .collect();
        let spec = attacks::AttackSpec {
            kind: attacks::AttackKind::GaussianNoise,
            malicious: malicious.clone(),
            activation_round: activation,
            noise_mean: 0.1,
            noise_variance: 0.1,
            seed,
        };
        let out = attacks::corrupt(&updates, round, &spec);
        for (i, (before, after)) in updates.iter().zip(&out).enumerate() {
            if !malicious.contains(&i) || round < activation {
                prop_assert_eq!(before, after);
            }
        }
    }
}

/// Drives softmax regression to convergence with full-batch gradient
/// descent; the oracle for "a converged model" used below.
fn train_to_convergence(oracle: &LossOracle, data: &Dataset, iters: usize) -> ParamVector {
    let mut params = ParamVector::zeros(oracle.param_dim());
    for _ in 0..iters {
        let grad = oracle.gradient(&params, data).unwrap();
        params = ParamVector::scale_add(1.0, &params, -0.5, &grad);
    }
    params
}

#[test]
fn converged_model_separates_wide_blobs() {
    for seed in [1u64, 2, 3] {
        let data = data::synthetic_blobs(100, 4, 2, 10.0, seed).unwrap();
        let oracle = LossOracle::softmax_regression(4, 2, 0.0);
        let params = train_to_convergence(&oracle, &data, 500);
        assert_eq!(oracle.accuracy(&params, &data).unwrap(), 1.0);
    }
}

#[test]
fn zero_separation_trains_to_chance() {
    let train = data::synthetic_blobs(2000, 4, 4, 0.0, 5).unwrap();
    let test = data::synthetic_blobs(1000, 4, 4, 0.0, 6).unwrap();
    let oracle = LossOracle::softmax_regression(4, 4, 0.0);
    let params = train_to_convergence(&oracle, &train, 300);
    let accuracy = oracle.accuracy(&params, &test).unwrap();
    assert!(
        (accuracy - 0.25).abs() <= 0.1,
        "indistinguishable classes gave accuracy {accuracy}"
    );
}

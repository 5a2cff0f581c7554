//! End-to-end acceptance suite. Each test prints one PASS line on success;
//! failures carry the measured values.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedsim::aggregation::{self, Aggregator};
use fedsim::attacks::{AttackKind, AttackSpec};
use fedsim::config::ConfigFile;
use fedsim::data;
use fedsim::engine::{self, DataSource, ExperimentConfig, ModelSpec};
use fedsim::model::{Dataset, LossOracle, OptimizerSpec, ParamVector};
use fedsim::report;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_updates(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<ParamVector> {
    (0..n)
        .map(|_| ParamVector::from_vec((0..d).map(|_| rng.random_range(-3.0..3.0)).collect()))
        .collect()
}

/// Criterion 1: the greedy aggregate never evaluates worse than the best
/// individual update, and it equals the plain prefix mean, over 1,000
/// randomized calls with quadratic and cross-entropy evaluators.
#[test]
fn criterion_01_greedy_guarantee_and_prefix_identity() {
    let mut rng = rng(0xACC1);
    let ce_data = data::synthetic_blobs(24, 3, 3, 2.0, 7).unwrap();
    let ce_oracle = LossOracle::softmax_regression(3, 3, 0.0);

    for case in 0..1000 {
        let n = rng.random_range(2..12);
        let use_cross_entropy = case % 2 == 1;
        let d = if use_cross_entropy {
            ce_oracle.param_dim()
        } else {
            rng.random_range(1..6)
        };
        let updates = random_updates(&mut rng, n, d);
        let center: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let server_loss = |x: &ParamVector| -> f64 {
            if use_cross_entropy {
                ce_oracle.loss(x, &ce_data).unwrap()
            } else {
                x.iter()
                    .zip(&center)
                    .map(|(v, c)| (v - c) * (v - c))
                    .sum()
            }
        };

        let (out, trace) = aggregation::fed_greed(&updates, server_loss, n).unwrap();

        let min_v = updates
            .iter()
            .map(&server_loss)
            .fold(f64::INFINITY, f64::min);
        let out_loss = server_loss(&out);
        assert!(
            out_loss <= min_v + 1e-12,
            "case {case}: output loss {out_loss} exceeds best individual {min_v}"
        );

        // Direct prefix mean of the first stop_j sorted updates.
        let mut mean = vec![0.0; d];
        for &id in &trace.sorted_client_ids[..trace.stop_j] {
            for (m, &x) in mean.iter_mut().zip(updates[id].iter()) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= trace.stop_j as f64;
        }
        for (a, b) in mean.iter().zip(out.iter()) {
            assert!(
                (a - b).abs() < 1e-12,
                "case {case}: prefix identity violated"
            );
        }
    }
    println!("PASS criterion 1: greedy guarantee and prefix identity over 1000 calls");
}

/// Independent scan of all N prefix candidates under the literal stopping
/// rule; sorting and acceptance logic are reimplemented from scratch.
fn exhaustive_first_stop(
    updates: &[ParamVector],
    server_loss: impl Fn(&ParamVector) -> f64,
) -> (usize, ParamVector, f64) {
    let key = |v: f64| if v.is_finite() { v } else { f64::INFINITY };
    let n = updates.len();
    let losses: Vec<f64> = updates.iter().map(&server_loss).collect();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| key(losses[a]).total_cmp(&key(losses[b])).then(a.cmp(&b)));

    // All N candidates by the incremental prefix-average recursion.
    let mut candidates: Vec<ParamVector> = Vec::with_capacity(n);
    candidates.push(updates[ids[0]].clone());
    for j in 2..=n {
        let jf = j as f64;
        let prev = &candidates[j - 2];
        candidates.push(ParamVector::scale_add(
            (jf - 1.0) / jf,
            prev,
            1.0 / jf,
            &updates[ids[j - 1]],
        ));
    }
    let candidate_losses: Vec<f64> = candidates.iter().map(&server_loss).collect();

    let mut stop = 1usize;
    while stop < n && key(candidate_losses[stop]) < key(candidate_losses[stop - 1]) {
        stop += 1;
    }
    (
        stop,
        candidates[stop - 1].clone(),
        candidate_losses[stop - 1],
    )
}

/// Criterion 2: the greedy walk matches a brute-force scan of all N prefix
/// candidates exactly, on 500 random instances with N <= 8.
#[test]
fn criterion_02_greedy_matches_exhaustive_prefix_scan() {
    let mut rng = rng(0xACC2);
    for case in 0..500 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..5);
        let updates = random_updates(&mut rng, n, d);
        let center: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let server_loss = |x: &ParamVector| -> f64 {
            x.iter()
                .zip(&center)
                .map(|(v, c)| (v - c) * (v - c))
                .sum()
        };

        let (out, trace) = aggregation::fed_greed(&updates, server_loss, n).unwrap();
        let (stop, expected, expected_loss) = exhaustive_first_stop(&updates, server_loss);

        assert_eq!(trace.stop_j, stop, "case {case}: stop index differs");
        assert_eq!(
            out.as_slice(),
            expected.as_slice(),
            "case {case}: output differs from the first non-improving prefix"
        );
        let out_loss = server_loss(&out);
        assert!(
            out_loss <= expected_loss,
            "case {case}: greedy loss above scan loss"
        );
        assert_eq!(
            out_loss.to_bits(),
            expected_loss.to_bits(),
            "case {case}: losses not bit-identical"
        );
    }
    println!("PASS criterion 2: greedy equals exhaustive prefix scan on 500 instances");
}

/// Brute-force Krum scores: full pairwise distance matrix, full sort.
fn krum_reference(updates: &[ParamVector], f_max: usize) -> Vec<f64> {
    let n = updates.len();
    let neighbors = n - f_max - 2;
    (0..n)
        .map(|i| {
            let mut dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    updates[i]
                        .iter()
                        .zip(updates[j].iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists.iter().take(neighbors).sum()
        })
        .collect()
}

/// Criterion 3: Krum scores match an independent brute-force implementation
/// and the selection is identical, across N, f, and d sweeps.
#[test]
fn criterion_03_krum_oracle_equivalence() {
    let mut rng = rng(0xACC3);
    let mut cases = 0;
    while cases < 200 {
        for &n in &[4usize, 5, 6, 7] {
            for &f_max in &[0usize, 1] {
                for &d in &[1usize, 3] {
                    let updates = random_updates(&mut rng, n, d);
                    let scores = aggregation::krum_scores(&updates, f_max).unwrap();
                    let expected = krum_reference(&updates, f_max);
                    for (s, e) in scores.iter().zip(&expected) {
                        assert!((s - e).abs() < 1e-10, "score mismatch: {s} vs {e}");
                    }
                    let chosen = aggregation::krum_select(&updates, f_max).unwrap();
                    let best = expected
                        .iter()
                        .enumerate()
                        .min_by(|(i, a), (j, b)| a.total_cmp(b).then(i.cmp(j)))
                        .unwrap()
                        .0;
                    assert_eq!(chosen.as_slice(), updates[best].as_slice());
                    cases += 1;
                }
            }
        }
    }
    println!("PASS criterion 3: krum matches brute force on {cases} instances");
}

/// Criterion 4: robust-statistics identities.
#[test]
fn criterion_04_robust_statistics_identities() {
    let mut rng = rng(0xACC4);

    // trimmed_mean(beta = 0) equals the unweighted mean exactly.
    for _ in 0..50 {
        let n = rng.random_range(1..9);
        let updates = random_updates(&mut rng, n, 6);
        let trimmed = aggregation::trimmed_mean(&updates, 0.0).unwrap();
        let mean = aggregation::mean_weighted(&updates, &vec![1.0; n]).unwrap();
        assert_eq!(trimmed.as_slice(), mean.as_slice());
    }

    // Median against a sort-based oracle, exactly.
    for _ in 0..200 {
        let n = rng.random_range(1..9);
        let d = rng.random_range(1..8);
        let updates = random_updates(&mut rng, n, d);
        let median = aggregation::coordinate_median(&updates).unwrap();
        for coord in 0..d {
            let mut vals: Vec<f64> = updates.iter().map(|u| u[coord]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected = if n % 2 == 1 {
                vals[n / 2]
            } else {
                0.5 * (vals[n / 2 - 1] + vals[n / 2])
            };
            assert_eq!(median[coord].to_bits(), expected.to_bits());
        }
    }

    // The worked trimming example.
    let updates: Vec<ParamVector> = [1.0, 2.0, 3.0, 4.0, 100.0]
        .iter()
        .map(|&v| ParamVector::from_vec(vec![v]))
        .collect();
    assert_eq!(aggregation::trimmed_mean(&updates, 0.2).unwrap()[0], 3.0);

    println!("PASS criterion 4: robust statistics identities");
}

/// Criterion 5: analytic gradients against central finite differences for
/// both model kinds, 100 random draws.
#[test]
fn criterion_05_gradient_correctness() {
    let mut rng = rng(0xACC5);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let n_features = rng.random_range(2..6);
        let classes = rng.random_range(2..5);
        let oracle = if draw % 2 == 0 {
            LossOracle::softmax_regression(n_features, classes, 0.01)
        } else {
            LossOracle::mlp(n_features, rng.random_range(2..5), classes, 0.01)
        };
        let n = rng.random_range(3..12);
        let features = (0..n * n_features)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let batch = Dataset::new(features, n_features, labels, classes).unwrap();
        let params = ParamVector::from_vec(
            (0..oracle.param_dim())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
        );

        let grad = oracle.gradient(&params, &batch).unwrap();
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let fd = (oracle.loss(&plus, &batch).unwrap()
                - oracle.loss(&minus, &batch).unwrap())
                / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
    println!("PASS criterion 5: max gradient relative error {worst:.2e} < 1e-5");
}

/// Criterion 6: Dirichlet partition properties — disjoint exhaustive cover,
/// near-uniformity at huge alpha, and skewness ordering across alpha.
#[test]
fn criterion_06_dirichlet_partition_properties() {
    let data = data::synthetic_blobs(2000, 4, 10, 3.0, 99).unwrap();
    let n_clients = 10;

    // Disjoint and exhaustive on 100 (alpha, seed) draws.
    let alphas = [0.1, 0.5, 1.0, 10.0, 1e6];
    for round in 0..100 {
        let alpha = alphas[round % alphas.len()];
        let plan = data::dirichlet_partition(&data, n_clients, alpha, round as u64).unwrap();
        let mut seen = BTreeSet::new();
        for a in &plan.assignments {
            assert!(!a.is_empty());
            for &i in a {
                assert!(seen.insert(i), "sample {i} assigned twice");
            }
        }
        assert_eq!(seen.len(), data.len());
    }

    // alpha = 1e6: per-class shares within 3 sigma of uniform.
    let per_class = data.len() / 10;
    let plan = data::dirichlet_partition(&data, n_clients, 1e6, 12345).unwrap();
    let counts = plan.class_counts(&data);
    let p = 1.0 / n_clients as f64;
    let sigma = (per_class as f64 * p * (1.0 - p)).sqrt();
    for row in &counts {
        for &c in row {
            assert!(
                (c as f64 - per_class as f64 * p).abs() <= 3.0 * sigma,
                "count {c} outside 3 sigma of {}",
                per_class as f64 * p
            );
        }
    }

    // Skewness ordering over 100 seeds.
    let mean_max_share = |alpha: f64| {
        let mut total = 0.0;
        for seed in 0..100u64 {
            let plan = data::dirichlet_partition(&data, n_clients, alpha, seed).unwrap();
            let counts = plan.class_counts(&data);
            for class in 0..10 {
                let class_total: usize = counts.iter().map(|r| r[class]).sum();
                let max: usize = counts.iter().map(|r| r[class]).max().unwrap();
                total += max as f64 / class_total as f64;
            }
        }
        total / 1000.0
    };
    let skewed = mean_max_share(0.1);
    let uniform = mean_max_share(1e6);
    assert!(
        skewed > uniform,
        "skewness ordering violated: {skewed} vs {uniform}"
    );
    println!(
        "PASS criterion 6: partition properties (max share {skewed:.3} at alpha=0.1 \
         vs {uniform:.3} at alpha=1e6)"
    );
}

/// The pre-registered directional harness: synthetic blobs, 10 clients, 5
/// malicious, attack at round 10 of 40, Adam defaults, seeds {1, 2, 3}.
/// Margins below were confirmed by the committed oracle run
/// (`tests/data/preregistered_margins.json`) before being frozen here.
fn directional_config(seed: u64, defense: &str, attack: &str) -> ExperimentConfig {
    let toml = format!(
        r#"
n_clients = 10
rounds = 40
local_steps = 10
batch_size = 32
alpha = 1.0

[optimizer]
kind = "adam"
learning_rate = 0.001

[data]
kind = "blobs"
train_samples = 2000
server_samples = 400
n_features = 64
n_classes = 4
separation = 6.0

[attack]
kind = "{attack}"
malicious = 5
activation_round = 10

[defense]
kind = "{defense}"
"#
    );
    let file: ConfigFile = toml::from_str(&toml).unwrap();
    file.materialize(seed).unwrap()
}

fn mean_post_attack(defense: &str, attack: &str) -> f64 {
    let mut total = 0.0;
    for seed in [1u64, 2, 3] {
        let output = engine::run_experiment(directional_config(seed, defense, attack)).unwrap();
        let summary = report::summarize(&output.records, 10).unwrap();
        total += summary.mean_post_attack_accuracy;
    }
    total / 3.0
}

/// Regenerates the committed oracle record backing criteria 7 and 8. Run
/// explicitly (`cargo test -- --ignored regenerate`) after changing the
/// directional harness, then review the new margins before re-freezing the
/// thresholds.
#[test]
#[ignore]
fn regenerate_preregistered_margins() {
    let mut arms = serde_json::Map::new();
    for (defense, attack) in [
        ("fed_greed", "label_flip"),
        ("mean", "label_flip"),
        ("fed_greed", "gaussian_noise"),
        ("mean", "gaussian_noise"),
        ("fed_greed", "none"),
        ("mean", "none"),
    ] {
        let mut per_seed = Vec::new();
        for seed in [1u64, 2, 3] {
            let output =
                engine::run_experiment(directional_config(seed, defense, attack)).unwrap();
            let summary = report::summarize(&output.records, 10).unwrap();
            per_seed.push(serde_json::json!({
                "seed": seed,
                "mean_post_attack_accuracy": summary.mean_post_attack_accuracy,
            }));
        }
        arms.insert(format!("{defense}/{attack}"), serde_json::json!(per_seed));
    }
    let record = serde_json::json!({
        "harness": "blobs n=2000/400 f=64 c=4 sep=6.0, 10 clients, 5 malicious, \
                    alpha=1.0, 40 rounds, activation 10, adam lr=0.001, R=10, batch 32",
        "seeds": [1, 2, 3],
        "thresholds": {
            "label_flip_margin_fed_greed_minus_mean": 0.15,
            "gaussian_noise_fed_greed_self_tolerance": 0.05,
            "gaussian_noise_mean_below": 0.5,
        },
        "arms": arms,
    });
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/preregistered_margins.json");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, serde_json::to_string_pretty(&record).unwrap()).unwrap();
    println!("wrote {}", path.display());
}

/// Criterion 7: under label flipping, the greedy defense beats plain mean
/// aggregation by at least 0.15 absolute accuracy (3-seed mean).
#[test]
fn criterion_07_directional_label_flip() {
    let greedy = mean_post_attack("fed_greed", "label_flip");
    let mean = mean_post_attack("mean", "label_flip");
    assert!(
        greedy - mean >= 0.15,
        "label-flip margin too small: fed_greed {greedy:.4} vs mean {mean:.4}"
    );
    println!(
        "PASS criterion 7: label flip, fed_greed {greedy:.4} vs mean {mean:.4} \
         (margin {:.4} >= 0.15)",
        greedy - mean
    );
}

/// Criterion 8: under Gaussian noise, the greedy defense stays within 0.05
/// of its own no-attack accuracy while plain mean degrades below 0.5.
#[test]
fn criterion_08_directional_gaussian_noise() {
    let greedy_noise = mean_post_attack("fed_greed", "gaussian_noise");
    let greedy_clean = mean_post_attack("fed_greed", "none");
    let mean_noise = mean_post_attack("mean", "gaussian_noise");
    assert!(
        (greedy_noise - greedy_clean).abs() <= 0.05,
        "fed_greed drifted under noise: {greedy_noise:.4} vs clean {greedy_clean:.4}"
    );
    assert!(
        mean_noise < 0.5,
        "mean survived the noise attack: {mean_noise:.4}"
    );
    println!(
        "PASS criterion 8: gaussian noise, fed_greed {greedy_noise:.4} \
         (clean {greedy_clean:.4}), mean {mean_noise:.4} < 0.5"
    );
}

fn mnist_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("FEDSIM_MNIST_DIR") {
        if !dir.is_empty() {
            return Some(PathBuf::from(dir));
        }
    }
    let default = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    default.exists().then_some(default)
}

fn find_idx(dir: &Path, stem: &str) -> Option<String> {
    for suffix in ["", ".gz"] {
        let candidate = dir.join(format!("{stem}{suffix}"));
        if candidate.exists() {
            return Some(candidate.to_string_lossy().into_owned());
        }
    }
    None
}

/// Criterion 9 (gated): on MNIST, the greedy defense beats plain mean under
/// label flipping over 50 rounds. Skips when the IDX files are absent.
#[test]
fn criterion_09_mnist_trend() {
    let Some(dir) = mnist_dir() else {
        println!(
            "SKIP criterion 9: MNIST IDX files not found \
             (set FEDSIM_MNIST_DIR or populate data/mnist)"
        );
        return;
    };
    let stems = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ];
    let mut paths = Vec::new();
    for stem in stems {
        match find_idx(&dir, stem) {
            Some(p) => paths.push(p),
            None => {
                println!("SKIP criterion 9: {stem} missing under {}", dir.display());
                return;
            }
        }
    }

    let run = |defense: &str| -> f64 {
        let mut total = 0.0;
        for seed in [1u64, 2, 3] {
            let config = ExperimentConfig {
                n_clients: 10,
                rounds: 50,
                local_steps: 10,
                batch_size: 32,
                optimizer: OptimizerSpec::adam(0.001),
                model: ModelSpec::default(),
                data: DataSource::Idx {
                    train_images: paths[0].clone(),
                    train_labels: paths[1].clone(),
                    test_images: paths[2].clone(),
                    test_labels: paths[3].clone(),
                },
                alpha: 1.0,
                seed,
                attack: AttackSpec {
                    kind: AttackKind::LabelFlip,
                    malicious: fedsim::attacks::sample_malicious(10, 5, seed),
                    activation_round: 10,
                    noise_mean: 0.1,
                    noise_variance: 0.1,
                    seed,
                },
                aggregator: match defense {
                    "mean" => Aggregator::Mean,
                    _ => Aggregator::FedGreed { k_cap: None },
                },
                include_trusted_client: false,
                parallel: true,
            };
            let output = engine::run_experiment(config).unwrap();
            total += report::summarize(&output.records, 10)
                .unwrap()
                .mean_post_attack_accuracy;
        }
        total / 3.0
    };

    let greedy = run("fed_greed");
    let mean = run("mean");
    assert!(
        greedy > mean,
        "MNIST trend violated: fed_greed {greedy:.4} vs mean {mean:.4}"
    );
    println!("PASS criterion 9: MNIST label flip, fed_greed {greedy:.4} > mean {mean:.4}");
}

/// Criterion 10: rerunning the CLI with the same effective configuration
/// produces byte-identical artifacts, with parallel client execution on.
#[test]
fn criterion_10_byte_identical_artifacts() {
    let binary = env!("CARGO_BIN_EXE_fedsim");
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.toml");
    std::fs::write(
        &config_path,
        r#"
n_clients = 6
rounds = 6
local_steps = 3
batch_size = 16
alpha = 0.5
seeds = [42]
parallel = true

[optimizer]
learning_rate = 0.01

[data]
kind = "blobs"
train_samples = 400
server_samples = 120
n_features = 8
n_classes = 3
separation = 5.0

[attack]
kind = "gaussian_noise"
malicious = 2
activation_round = 2

[defense]
kind = "fed_greed"
"#,
    )
    .unwrap();

    let artifacts = [
        "config_s42.json",
        "round_s42.csv",
        "summary_s42.json",
        "accuracy_s42.svg",
        "partition_s42.svg",
    ];
    let mut snapshots: Vec<Vec<Vec<u8>>> = Vec::new();
    for pass in 0..2 {
        let out = dir.path().join(format!("out{pass}"));
        let status = std::process::Command::new(binary)
            .args([
                "run",
                "--config",
                config_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success());
        snapshots.push(
            artifacts
                .iter()
                .map(|name| std::fs::read(out.join(name)).unwrap())
                .collect(),
        );
    }
    for (name, (a, b)) in artifacts
        .iter()
        .zip(snapshots[0].iter().zip(snapshots[1].iter()))
    {
        assert_eq!(a, b, "{name} differs between reruns");
    }

    // The effective-config echo itself reproduces the run.
    let echo = dir.path().join("out0/config_s42.json");
    let out = dir.path().join("out_echo");
    let status = std::process::Command::new(binary)
        .args([
            "run",
            "--config",
            echo.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    for name in &artifacts {
        let a = std::fs::read(dir.path().join("out0").join(name)).unwrap();
        let b = std::fs::read(out.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs when rerun from the effective config");
    }

    println!("PASS criterion 10: byte-identical artifacts across reruns and config echo");
}

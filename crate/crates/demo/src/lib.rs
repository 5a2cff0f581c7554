//! Browser bindings for the simulator: three interactive operations that
//! return self-contained SVG or JSON strings for a static page to inject.

use wasm_bindgen::prelude::*;

use fedsim::config::ConfigFile;
use fedsim::report::{self, AccuracySeries};

/// Bubble chart of a Dirichlet partition of the default synthetic dataset.
#[wasm_bindgen]
pub fn partition_chart(n_clients: u32, alpha: f64, seed: u32) -> Result<String, JsValue> {
    partition_chart_impl(n_clients as usize, alpha, seed as u64).map_err(to_js)
}

/// Accuracy-over-rounds chart comparing the chosen defense against plain
/// mean aggregation under the same attack and seed.
#[wasm_bindgen]
pub fn accuracy_chart(
    defense: &str,
    attack: &str,
    malicious: u32,
    alpha: f64,
    rounds: u32,
    seed: u32,
) -> Result<String, JsValue> {
    accuracy_chart_impl(
        defense,
        attack,
        malicious as usize,
        alpha,
        rounds as usize,
        seed as u64,
    )
    .map_err(to_js)
}

/// Run summary (JSON) for the chosen defense, attack, and seed.
#[wasm_bindgen]
pub fn run_summary(
    defense: &str,
    attack: &str,
    malicious: u32,
    alpha: f64,
    rounds: u32,
    seed: u32,
) -> Result<String, JsValue> {
    run_summary_impl(
        defense,
        attack,
        malicious as usize,
        alpha,
        rounds as usize,
        seed as u64,
    )
    .map_err(to_js)
}

fn to_js(e: fedsim::SimError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn demo_config(
    defense: &str,
    attack: &str,
    malicious: usize,
    alpha: f64,
    rounds: usize,
) -> ConfigFile {
    let mut file = ConfigFile::default();
    // Small enough to run in tens of milliseconds inside the browser.
    file.n_clients = 10;
    file.rounds = rounds;
    file.local_steps = 3;
    file.batch_size = 16;
    file.alpha = alpha;
    file.optimizer.learning_rate = 0.05;
    file.data.train_samples = 600;
    file.data.server_samples = 200;
    file.data.n_features = 8;
    file.data.n_classes = 4;
    file.data.separation = 6.0;
    file.attack.kind = attack.to_string();
    file.attack.malicious = malicious;
    file.attack.activation_round = (rounds / 4).max(1);
    file.defense.kind = defense.to_string();
    file
}

fn partition_chart_impl(n_clients: usize, alpha: f64, seed: u64) -> fedsim::Result<String> {
    let data = fedsim::data::synthetic_blobs(600, 8, 4, 6.0, seed)?;
    let plan = fedsim::data::dirichlet_partition(&data, n_clients, alpha, seed)?;
    report::partition_svg(&plan.class_counts(&data))
}

fn accuracy_chart_impl(
    defense: &str,
    attack: &str,
    malicious: usize,
    alpha: f64,
    rounds: usize,
    seed: u64,
) -> fedsim::Result<String> {
    let file = demo_config(defense, attack, malicious, alpha, rounds);
    let chosen = fedsim::engine::run_experiment(file.materialize(seed)?)?;
    let mut series = vec![AccuracySeries::from_records(defense, &chosen.records)];
    if defense != "mean" {
        let mut baseline = file.clone();
        baseline.defense.kind = "mean".into();
        let mean = fedsim::engine::run_experiment(baseline.materialize(seed)?)?;
        series.push(AccuracySeries::from_records("mean", &mean.records));
    }
    report::accuracy_svg(&series, Some(file.attack.activation_round))
}

fn run_summary_impl(
    defense: &str,
    attack: &str,
    malicious: usize,
    alpha: f64,
    rounds: usize,
    seed: u64,
) -> fedsim::Result<String> {
    let file = demo_config(defense, attack, malicious, alpha, rounds);
    let config = file.materialize(seed)?;
    let output = fedsim::engine::run_experiment(config.clone())?;
    let mut summary = report::summarize(&output.records, config.attack.activation_round)?;
    summary.config_hash = fedsim::config::config_hash(&config);
    summary.warnings.extend(output.warnings);
    serde_json::to_string_pretty(&summary)
        .map_err(|e| fedsim::SimError::Config(format!("summary serialization failed: {e}")))
}

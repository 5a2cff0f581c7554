//! Declarative experiment configuration.
//!
//! A config file is flat TOML with one nesting level for the `model`,
//! `optimizer`, `data`, `attack`, and `defense` blocks. Unknown keys are
//! rejected. Materializing a file against one seed resolves every default
//! and every sampled choice (such as the malicious set) into an
//! [`ExperimentConfig`], which serializes as the effective-config echo; a
//! JSON file holding such an echo is itself accepted as a config and
//! reproduces the run bit-identically.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::Aggregator;
use crate::attacks::{self, AttackKind, AttackSpec};
use crate::engine::{DataSource, ExperimentConfig, ModelSpec};
use crate::error::SimError;
use crate::model::{ModelKind, OptimizerKind, OptimizerSpec};
use crate::Result;

fn default_n_clients() -> usize {
    10
}
fn default_rounds() -> usize {
    50
}
fn default_local_steps() -> usize {
    5
}
fn default_batch_size() -> usize {
    32
}
fn default_alpha() -> f64 {
    1.0
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output_dir() -> String {
    "out".into()
}
fn default_true() -> bool {
    true
}

/// On-disk experiment description. Every field has a default, so `{}` is a
/// valid (if dull) experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default = "default_n_clients")]
    pub n_clients: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Seeds to run; `run` and `sweep` iterate over these.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub include_trusted_client: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub defense: DefenseConfig,
}

impl Default for ConfigFile {
    fn default() -> Self {
        toml::from_str("").expect("empty config must parse")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub l2: f64,
}

fn default_hidden() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::SoftmaxRegression,
            hidden: default_hidden(),
            l2: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_eps(),
        }
    }
}

/// Data source block; `kind` selects which of the remaining keys apply.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_data_kind")]
    pub kind: String,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_server_samples")]
    pub server_samples: usize,
    #[serde(default = "default_n_features")]
    pub n_features: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub train_images: String,
    #[serde(default)]
    pub train_labels: String,
    #[serde(default)]
    pub test_images: String,
    #[serde(default)]
    pub test_labels: String,
}

fn default_data_kind() -> String {
    "blobs".into()
}
fn default_train_samples() -> usize {
    2000
}
fn default_server_samples() -> usize {
    400
}
fn default_n_features() -> usize {
    16
}
fn default_n_classes() -> usize {
    4
}
fn default_separation() -> f64 {
    6.0
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: default_data_kind(),
            train_samples: default_train_samples(),
            server_samples: default_server_samples(),
            n_features: default_n_features(),
            n_classes: default_n_classes(),
            separation: default_separation(),
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_attack_kind")]
    pub kind: String,
    /// Number of malicious clients, sampled per run seed.
    #[serde(default)]
    pub malicious: usize,
    /// Explicit malicious ids; wins over `malicious` when non-empty.
    #[serde(default)]
    pub malicious_ids: Vec<usize>,
    #[serde(default = "default_activation_round")]
    pub activation_round: usize,
    #[serde(default = "default_noise_mean")]
    pub noise_mean: f64,
    #[serde(default = "default_noise_variance")]
    pub noise_variance: f64,
    /// Noise-stream seed; defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_attack_kind() -> String {
    "none".into()
}
fn default_activation_round() -> usize {
    10
}
fn default_noise_mean() -> f64 {
    0.1
}
fn default_noise_variance() -> f64 {
    0.1
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: default_attack_kind(),
            malicious: 0,
            malicious_ids: Vec::new(),
            activation_round: default_activation_round(),
            noise_mean: default_noise_mean(),
            noise_variance: default_noise_variance(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default = "default_defense_kind")]
    pub kind: String,
    /// Trimmed-mean trim fraction.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Krum/Multi-Krum expected adversary count; defaults to the configured
    /// malicious count.
    #[serde(default)]
    pub f_max: Option<usize>,
    /// Multi-Krum selection count; defaults to the benign population.
    #[serde(default)]
    pub k_select: Option<usize>,
    /// FedGreed prefix cap; defaults to the cohort size.
    #[serde(default)]
    pub k_cap: Option<usize>,
}

fn default_defense_kind() -> String {
    "fed_greed".into()
}
fn default_beta() -> f64 {
    0.2
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            kind: default_defense_kind(),
            beta: default_beta(),
            f_max: None,
            k_select: None,
            k_cap: None,
        }
    }
}

impl ConfigFile {
    /// Parses TOML (`*.toml`) or an effective-config JSON echo (`*.json`).
    ///
    /// A JSON file yields a fully pinned single-seed configuration; TOML
    /// goes through default materialization per seed.
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        if path.extension().map(|e| e.eq_ignore_ascii_case("json")) == Some(true) {
            let effective: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
            Ok(LoadedConfig::Effective(Box::new(effective)))
        } else {
            let file: ConfigFile = toml::from_str(&text)
                .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
            Ok(LoadedConfig::File(Box::new(file)))
        }
    }

    fn data_source(&self) -> Result<DataSource> {
        match self.data.kind.as_str() {
            "blobs" => Ok(DataSource::Blobs {
                train_samples: self.data.train_samples,
                server_samples: self.data.server_samples,
                n_features: self.data.n_features,
                n_classes: self.data.n_classes,
                separation: self.data.separation,
            }),
            "idx" => {
                for (key, value) in [
                    ("data.train_images", &self.data.train_images),
                    ("data.train_labels", &self.data.train_labels),
                    ("data.test_images", &self.data.test_images),
                    ("data.test_labels", &self.data.test_labels),
                ] {
                    if value.is_empty() {
                        return Err(SimError::Config(format!(
                            "{key} is required when data.kind = \"idx\""
                        )));
                    }
                }
                Ok(DataSource::Idx {
                    train_images: self.data.train_images.clone(),
                    train_labels: self.data.train_labels.clone(),
                    test_images: self.data.test_images.clone(),
                    test_labels: self.data.test_labels.clone(),
                })
            }
            other => Err(SimError::Config(format!(
                "data.kind: unknown source \"{other}\" (expected blobs or idx)"
            ))),
        }
    }

    fn attack_spec(&self, seed: u64) -> Result<AttackSpec> {
        let kind = match self.attack.kind.as_str() {
            "none" => AttackKind::None,
            "label_flip" => AttackKind::LabelFlip,
            "gaussian_noise" => AttackKind::GaussianNoise,
            other => {
                return Err(SimError::Config(format!(
                    "attack.kind: unknown attack \"{other}\" \
                     (expected none, label_flip, or gaussian_noise)"
                )))
            }
        };
        let malicious: BTreeSet<usize> = if !self.attack.malicious_ids.is_empty() {
            self.attack.malicious_ids.iter().copied().collect()
        } else {
            attacks::sample_malicious(self.n_clients, self.attack.malicious, seed)
        };
        Ok(AttackSpec {
            kind,
            malicious,
            activation_round: self.attack.activation_round,
            noise_mean: self.attack.noise_mean,
            noise_variance: self.attack.noise_variance,
            seed: self.attack.seed.unwrap_or(seed),
        })
    }

    fn aggregator(&self, malicious_count: usize) -> Result<Aggregator> {
        let cohort = self.n_clients + usize::from(self.include_trusted_client);
        let f_max = self.defense.f_max.unwrap_or(malicious_count);
        let k_select = self
            .defense
            .k_select
            .unwrap_or_else(|| self.n_clients.saturating_sub(malicious_count).max(1));
        Ok(match self.defense.kind.as_str() {
            "mean" => Aggregator::Mean,
            "trimmed_mean" => Aggregator::TrimmedMean {
                beta: self.defense.beta,
            },
            "median" => Aggregator::Median,
            "krum" => Aggregator::Krum { f_max },
            "multi_krum" => Aggregator::MultiKrum { f_max, k_select },
            "fed_greed" => Aggregator::FedGreed {
                k_cap: Some(self.defense.k_cap.unwrap_or(cohort)),
            },
            other => {
                return Err(SimError::Config(format!(
                    "defense.kind: unknown rule \"{other}\" (expected mean, trimmed_mean, \
                     median, krum, multi_krum, or fed_greed)"
                )))
            }
        })
    }

    /// Resolves every default and sampled choice for one run seed.
    pub fn materialize(&self, seed: u64) -> Result<ExperimentConfig> {
        let attack = self.attack_spec(seed)?;
        let aggregator = self.aggregator(attack.malicious.len())?;
        Ok(ExperimentConfig {
            n_clients: self.n_clients,
            rounds: self.rounds,
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            optimizer: OptimizerSpec {
                kind: self.optimizer.kind,
                learning_rate: self.optimizer.learning_rate,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                epsilon: self.optimizer.epsilon,
            },
            model: ModelSpec {
                kind: self.model.kind,
                hidden: self.model.hidden,
                l2: self.model.l2,
            },
            data: self.data_source()?,
            alpha: self.alpha,
            seed,
            attack,
            aggregator,
            include_trusted_client: self.include_trusted_client,
            parallel: self.parallel,
        })
    }
}

/// What [`ConfigFile::load`] produced: a declarative file still to be
/// materialized per seed, or an already-pinned effective config.
pub enum LoadedConfig {
    File(Box<ConfigFile>),
    Effective(Box<ExperimentConfig>),
}

/// SHA-256 of the canonical JSON encoding of an effective config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let json = serde_json::to_string(config).expect("config serialization cannot fail");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Dry-run precondition checks; returns every violation, each naming the
/// rule it breaks.
pub fn validate_all(config: &ExperimentConfig) -> Vec<String> {
    let mut violations = Vec::new();
    if config.rounds == 0 {
        violations.push("engine: rounds must be >= 1".to_string());
    }
    if config.local_steps == 0 {
        violations.push("engine: local_steps must be >= 1".to_string());
    }
    if config.batch_size == 0 {
        violations.push("engine: batch_size must be >= 1".to_string());
    }
    if config.n_clients == 0 {
        violations.push("engine: n_clients must be >= 1".to_string());
    }
    if !config.alpha.is_finite() || config.alpha <= 0.0 {
        violations.push(format!("data: alpha must be positive, got {}", config.alpha));
    }
    if let Err(e) = config.attack.validate(config.n_clients) {
        violations.push(format!("attacks: {e}"));
    }
    if let Err(e) = config.aggregator.validate(config.cohort_size()) {
        violations.push(format!("aggregation: {e}"));
    }
    violations
}

//! Byzantine client behaviors.
//!
//! Two independent attacks: label flipping (data poisoning, applied to a
//! malicious client's local dataset before training) and additive Gaussian
//! noise (model poisoning, applied to the outgoing update). Noise streams
//! are derived per (client, round) so results do not depend on client
//! scheduling.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::model::{Dataset, ParamVector};
use crate::rng::{self, TAG_ATTACK};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    LabelFlip,
    GaussianNoise,
}

/// What the adversary does, to whom, and from when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Malicious client ids; must leave at least one honest client.
    pub malicious: BTreeSet<usize>,
    /// First round (0-based) at which the attack is active; it then persists.
    pub activation_round: usize,
    /// Gaussian noise mean.
    pub noise_mean: f64,
    /// Gaussian noise variance (the standard deviation is its square root).
    pub noise_variance: f64,
    /// Seed for the per-(client, round) noise streams.
    pub seed: u64,
}

impl AttackSpec {
    pub fn none() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            malicious: BTreeSet::new(),
            activation_round: 10,
            noise_mean: 0.1,
            noise_variance: 0.1,
            seed: 0,
        }
    }

    /// Checks the malicious set against the cohort size: ids in range and at
    /// least one honest client.
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if let Some(&bad) = self.malicious.iter().find(|&&i| i >= n_clients) {
            return Err(SimError::Config(format!(
                "malicious client id {bad} out of range for {n_clients} clients"
            )));
        }
        if self.kind != AttackKind::None && self.malicious.len() >= n_clients {
            return Err(SimError::Config(format!(
                "all {n_clients} clients marked malicious; at least one must stay honest"
            )));
        }
        if self.kind == AttackKind::GaussianNoise
            && (!self.noise_variance.is_finite() || self.noise_variance <= 0.0)
        {
            return Err(SimError::Config(format!(
                "noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    /// Whether the attack perturbs anything at the given round.
    pub fn active_at(&self, round: usize) -> bool {
        self.kind != AttackKind::None
            && !self.malicious.is_empty()
            && round >= self.activation_round
    }
}

/// Maps every label `c` to `C - c - 1`; features untouched. Involutive.
pub fn flip_labels(data: &Dataset) -> Dataset {
    let c = data.num_classes();
    let flipped = data.labels().iter().map(|&l| c - l - 1).collect();
    data.with_labels(flipped)
}

/// Adds i.i.d. `Normal(mean, variance)` noise per coordinate, drawn from the
/// given stream. Deterministic given the stream state.
pub fn add_gaussian_noise(
    update: &ParamVector,
    mean: f64,
    variance: f64,
    stream: &mut ChaCha8Rng,
) -> ParamVector {
    let normal = Normal::new(mean, variance.sqrt()).expect("variance must be positive and finite");
    ParamVector::from_vec(
        update
            .iter()
            .map(|&w| w + normal.sample(stream))
            .collect(),
    )
}

/// Applies the model-poisoning side of the attack to a round's updates.
///
/// Honest clients' vectors pass through bit-identical. Label flipping is a
/// no-op here; it acts on local data before training. Each malicious
/// client's noise stream is derived from `(seed, client, round)`.
pub fn corrupt(updates: &[ParamVector], round: usize, spec: &AttackSpec) -> Vec<ParamVector> {
    updates
        .iter()
        .enumerate()
        .map(|(client, update)| {
            if spec.kind == AttackKind::GaussianNoise
                && spec.active_at(round)
                && spec.malicious.contains(&client)
            {
                let mut stream = rng::stream(spec.seed, &[TAG_ATTACK, client as u64, round as u64]);
                add_gaussian_noise(update, spec.noise_mean, spec.noise_variance, &mut stream)
            } else {
                update.clone()
            }
        })
        .collect()
}

/// Samples `m` distinct malicious client ids from `0..n_clients`.
pub fn sample_malicious(n_clients: usize, m: usize, seed: u64) -> BTreeSet<usize> {
    let mut ids: Vec<usize> = (0..n_clients).collect();
    let mut stream = rng::stream(seed, &[rng::TAG_MALICIOUS]);
    use rand::Rng;
    for i in (1..ids.len()).rev() {
        let j = stream.random_range(0..=i);
        ids.swap(i, j);
    }
    ids.into_iter().take(m).collect()
}

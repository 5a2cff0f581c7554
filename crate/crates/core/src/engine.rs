//! The federated training loop.
//!
//! Each round: broadcast the global model, train every client locally for a
//! fixed number of optimizer steps, apply the attack, aggregate, and score
//! the new global model on the server's evaluation set. Client work is
//! independent and may run in parallel; per-(client, round) seed streams make
//! the telemetry identical either way.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, Aggregator, GreedyTrace};
use crate::attacks::{self, AttackKind, AttackSpec};
use crate::data::{self, PartitionPlan, ServerSplit};
use crate::error::SimError;
use crate::model::{Dataset, LossOracle, ModelKind, OptimizerSpec, OptimizerState, ParamVector};
use crate::rng::{self, TAG_INIT, TAG_TRAIN};
use crate::Result;

/// Model architecture and regularization, independent of data dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden width; used by the MLP only.
    pub hidden: usize,
    /// L2 coefficient.
    pub l2: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            hidden: 32,
            l2: 0.0,
        }
    }
}

impl ModelSpec {
    pub fn oracle(&self, n_features: usize, num_classes: usize) -> LossOracle {
        match self.kind {
            ModelKind::SoftmaxRegression => {
                LossOracle::softmax_regression(n_features, num_classes, self.l2)
            }
            ModelKind::Mlp1Hidden => LossOracle::mlp(n_features, self.hidden, num_classes, self.l2),
        }
    }
}

/// Where the training pool and the server's trusted pool come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic Gaussian blobs; the server pool is an independent draw from
    /// the same distribution.
    Blobs {
        train_samples: usize,
        server_samples: usize,
        n_features: usize,
        n_classes: usize,
        separation: f64,
    },
    /// IDX image/label files; the server retains the test pair.
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

/// Fully resolved description of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub rounds: usize,
    /// Local optimizer steps per client per round.
    pub local_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub model: ModelSpec,
    pub data: DataSource,
    /// Dirichlet concentration for the client partition.
    pub alpha: f64,
    /// Master seed; every stream in the run derives from it.
    pub seed: u64,
    pub attack: AttackSpec,
    pub aggregator: Aggregator,
    /// Adds an always-honest extra client trained on the server's selection
    /// set.
    pub include_trusted_client: bool,
    /// Run client training on a thread pool.
    pub parallel: bool,
}

impl ExperimentConfig {
    /// Structural checks that need no data: cohort-dependent aggregator and
    /// attack preconditions.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(SimError::Config("rounds must be >= 1".into()));
        }
        if self.local_steps == 0 {
            return Err(SimError::Config("local_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SimError::Config("batch_size must be >= 1".into()));
        }
        if self.n_clients == 0 {
            return Err(SimError::Config("n_clients must be >= 1".into()));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(SimError::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        self.attack.validate(self.n_clients)?;
        self.aggregator.validate(self.cohort_size())?;
        Ok(())
    }

    /// Number of participants per round, counting the trusted client.
    pub fn cohort_size(&self) -> usize {
        self.n_clients + usize::from(self.include_trusted_client)
    }
}

/// Per-round telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 0-based round index.
    pub round: usize,
    /// Trusted-set loss of each (possibly attacked) client model, in client
    /// order.
    pub client_losses: Vec<f64>,
    /// Present when the aggregator is FedGreed.
    pub greedy: Option<GreedyTrace>,
    /// Centralized accuracy of the new global model on the evaluation set.
    pub accuracy: f64,
    /// Loss of the new global model on the evaluation set.
    pub server_loss: f64,
    /// Whether the attack perturbed anything this round.
    pub attacked: bool,
}

/// Outcome of a full run.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub final_params: ParamVector,
    /// Clients x classes sample counts of the training partition.
    pub partition_class_counts: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Trains a fresh local model from the broadcast parameters.
///
/// A new optimizer is created each call; minibatches are sampled without
/// replacement from a seeded shuffle, reshuffling when the pass is
/// exhausted. A batch size above the dataset size is clamped (flagged via
/// the returned bool).
pub fn local_train(
    client_data: &Dataset,
    global_params: &ParamVector,
    oracle: &LossOracle,
    opt: OptimizerSpec,
    local_steps: usize,
    batch_size: usize,
    stream: &mut ChaCha8Rng,
) -> Result<(ParamVector, bool)> {
    if client_data.is_empty() {
        return Err(SimError::InvalidInput(
            "local training requires a non-empty dataset".into(),
        ));
    }
    let n = client_data.len();
    let clamped = batch_size > n;
    let batch = batch_size.min(n);

    let mut state = OptimizerState::new(opt, global_params.len());
    let mut params = global_params.clone();
    let mut deck: Vec<usize> = Vec::new();
    for _ in 0..local_steps {
        if deck.len() < batch {
            deck = (0..n).collect();
            shuffle(&mut deck, stream);
        }
        let take: Vec<usize> = deck.drain(deck.len() - batch..).collect();
        let minibatch = client_data.subset(&take);
        let grad = oracle.gradient(&params, &minibatch)?;
        params = state.step(&params, &grad)?;
    }
    Ok((params, clamped))
}

fn shuffle(values: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..values.len()).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
}

/// A prepared simulation: data loaded, partitioned, and the model
/// initialized. Stepping it produces one [`RoundRecord`] per round.
pub struct Experiment {
    config: ExperimentConfig,
    oracle: LossOracle,
    /// Clean local shards, trusted client last when enabled.
    client_data: Vec<Dataset>,
    /// Label-flipped variants for malicious clients, populated on demand.
    flipped_data: Vec<Option<Dataset>>,
    server: ServerSplit,
    partition: PartitionPlan,
    params: ParamVector,
    round: usize,
    warnings: Vec<String>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;

        let (train, server_pool) = match &config.data {
            DataSource::Blobs {
                train_samples,
                server_samples,
                n_features,
                n_classes,
                separation,
            } => {
                let train = data::synthetic_blobs(
                    *train_samples,
                    *n_features,
                    *n_classes,
                    *separation,
                    rng::derive(seed, &[rng::TAG_BLOBS_TRAIN]),
                )?;
                let server = data::synthetic_blobs(
                    *server_samples,
                    *n_features,
                    *n_classes,
                    *separation,
                    rng::derive(seed, &[rng::TAG_BLOBS_SERVER]),
                )?;
                (train, server)
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = data::load_idx(train_images.as_ref(), train_labels.as_ref())?;
                let server = data::load_idx(test_images.as_ref(), test_labels.as_ref())?;
                let classes = train.num_classes().max(server.num_classes());
                (
                    train.with_num_classes(classes)?,
                    server.with_num_classes(classes)?,
                )
            }
        };

        let partition = data::dirichlet_partition(&train, config.n_clients, config.alpha, seed)?;
        let server = data::split_server_set(&server_pool, seed)?;

        let mut client_data: Vec<Dataset> = partition
            .assignments
            .iter()
            .map(|idxs| train.subset(idxs))
            .collect();
        if config.include_trusted_client {
            // The trusted client trains on the server's own selection shard.
            client_data.push(server.selection_set.clone());
        }
        let flipped_data = vec![None; client_data.len()];

        let oracle = config.model.oracle(train.n_features(), train.num_classes());
        let dim = oracle.param_dim();

        // x^0: coordinates i.i.d. Normal(0, 0.01) from the init stream.
        let mut init_rng = rng::stream(seed, &[TAG_INIT]);
        let params = ParamVector::from_vec(
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut init_rng);
                    0.1 * z
                })
                .collect(),
        );

        Ok(Experiment {
            config,
            oracle,
            client_data,
            flipped_data,
            server,
            partition,
            params,
            round: 0,
            warnings: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn partition(&self) -> &PartitionPlan {
        &self.partition
    }

    pub fn server(&self) -> &ServerSplit {
        &self.server
    }

    /// Training set for client `i` at round `t`: the flipped variant for
    /// malicious clients once a label-flip attack is active, the clean shard
    /// otherwise.
    fn training_data(&mut self, client: usize, round: usize) -> &Dataset {
        let spec = &self.config.attack;
        if spec.kind == AttackKind::LabelFlip
            && spec.active_at(round)
            && spec.malicious.contains(&client)
        {
            if self.flipped_data[client].is_none() {
                self.flipped_data[client] = Some(attacks::flip_labels(&self.client_data[client]));
            }
            self.flipped_data[client].as_ref().unwrap()
        } else {
            &self.client_data[client]
        }
    }

    /// Runs one communication round and advances the global model.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let t = self.round;
        let cohort = self.client_data.len();
        let cfg = self.config.clone();

        // Resolve per-client training sets up front (label flipping).
        for client in 0..cohort {
            self.training_data(client, t);
        }
        let datasets: Vec<&Dataset> = (0..cohort)
            .map(|client| {
                let spec = &cfg.attack;
                if spec.kind == AttackKind::LabelFlip
                    && spec.active_at(t)
                    && spec.malicious.contains(&client)
                {
                    self.flipped_data[client].as_ref().unwrap()
                } else {
                    &self.client_data[client]
                }
            })
            .collect();

        let train_one = |client: usize| -> Result<(ParamVector, bool)> {
            let mut stream = rng::stream(cfg.seed, &[TAG_TRAIN, client as u64, t as u64]);
            local_train(
                datasets[client],
                &self.params,
                &self.oracle,
                cfg.optimizer,
                cfg.local_steps,
                cfg.batch_size,
                &mut stream,
            )
        };

        let trained: Vec<(ParamVector, bool)> = if cfg.parallel {
            (0..cohort)
                .into_par_iter()
                .map(train_one)
                .collect::<Result<_>>()?
        } else {
            (0..cohort).map(train_one).collect::<Result<_>>()?
        };

        let mut locals = Vec::with_capacity(cohort);
        for (client, (params, clamped)) in trained.into_iter().enumerate() {
            if clamped && t == 0 {
                self.warnings.push(format!(
                    "client {client}: batch_size {} clamped to local dataset size {}",
                    cfg.batch_size,
                    datasets[client].len()
                ));
            }
            locals.push(params);
        }

        // Model poisoning on the outgoing updates.
        let submitted = attacks::corrupt(&locals, t, &cfg.attack);

        // Trusted-set score of every submission.
        let selection = &self.server.selection_set;
        let client_losses: Vec<f64> = submitted
            .iter()
            .map(|x| self.oracle.loss(x, selection).unwrap_or(f64::NAN))
            .collect();

        let mut greedy = None;
        let next = match &cfg.aggregator {
            Aggregator::Mean => {
                let weights: Vec<f64> = datasets.iter().map(|d| d.len() as f64).collect();
                aggregation::mean_weighted(&submitted, &weights)?
            }
            Aggregator::TrimmedMean { beta } => aggregation::trimmed_mean(&submitted, *beta)?,
            Aggregator::Median => aggregation::coordinate_median(&submitted)?,
            Aggregator::Krum { f_max } => aggregation::krum_select(&submitted, *f_max)?,
            Aggregator::MultiKrum { f_max, k_select } => {
                let outcome = aggregation::multi_krum(&submitted, *f_max, *k_select)?;
                if outcome.clamped && t == 0 {
                    self.warnings.push(format!(
                        "multi_krum: k_select {} clamped to {}",
                        k_select,
                        outcome.selected.len()
                    ));
                }
                outcome.aggregate
            }
            Aggregator::FedGreed { k_cap } => {
                let cap = k_cap.unwrap_or(cohort);
                let oracle = &self.oracle;
                let (out, trace) = aggregation::fed_greed(
                    &submitted,
                    |x| oracle.loss(x, selection).unwrap_or(f64::NAN),
                    cap,
                )?;
                greedy = Some(trace);
                out
            }
        };

        self.params = next;
        self.round += 1;

        let evaluation = &self.server.evaluation_set;
        let accuracy = self.oracle.accuracy(&self.params, evaluation)?;
        let server_loss = self.oracle.loss(&self.params, evaluation).unwrap_or(f64::NAN);

        Ok(RoundRecord {
            round: t,
            client_losses,
            greedy,
            accuracy,
            server_loss,
            attacked: cfg.attack.active_at(t),
        })
    }

    /// Runs the configured number of rounds from the current state.
    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        let mut records = Vec::with_capacity(self.config.rounds);
        while self.round < self.config.rounds {
            records.push(self.run_round()?);
        }
        Ok(records)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Clients x classes sample counts of the training partition (regular
    /// clients only).
    pub fn partition_class_counts(&self) -> Vec<Vec<usize>> {
        self.client_data[..self.config.n_clients]
            .iter()
            .map(|d| {
                let mut row = vec![0usize; d.num_classes()];
                for k in 0..d.len() {
                    row[d.label(k)] += 1;
                }
                row
            })
            .collect()
    }
}

/// Convenience wrapper: prepare, run to completion, and collect outputs.
pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentOutput> {
    let mut experiment = Experiment::new(config)?;
    let records = experiment.run()?;
    Ok(ExperimentOutput {
        records,
        final_params: experiment.params.clone(),
        partition_class_counts: experiment.partition_class_counts(),
        warnings: experiment.warnings.clone(),
    })
}

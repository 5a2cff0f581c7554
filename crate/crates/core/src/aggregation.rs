//! Server-side aggregation rules.
//!
//! Six rules: weighted mean (FedAvg), coordinate-wise trimmed mean,
//! coordinate-wise median, Krum, Multi-Krum, and FedGreed. FedGreed scores
//! every client model with a trusted-loss evaluator, sorts ascending, and
//! extends the running prefix average one model at a time while the
//! evaluator value strictly improves. By construction its output never
//! evaluates worse than the best individual model.

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::model::ParamVector;
use crate::Result;

/// Aggregation rule selection plus per-rule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Aggregator {
    Mean,
    TrimmedMean {
        beta: f64,
    },
    Median,
    Krum {
        f_max: usize,
    },
    MultiKrum {
        f_max: usize,
        k_select: usize,
    },
    FedGreed {
        /// Largest prefix size considered; `None` means all N clients.
        #[serde(default)]
        k_cap: Option<usize>,
    },
}

impl Aggregator {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::TrimmedMean { .. } => "trimmed_mean",
            Aggregator::Median => "median",
            Aggregator::Krum { .. } => "krum",
            Aggregator::MultiKrum { .. } => "multi_krum",
            Aggregator::FedGreed { .. } => "fed_greed",
        }
    }

    /// Dry-run precondition checks against a cohort of `n_clients`.
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if n_clients == 0 {
            return Err(SimError::Config("aggregation requires at least one client".into()));
        }
        match *self {
            Aggregator::Mean | Aggregator::Median => Ok(()),
            Aggregator::TrimmedMean { beta } => {
                if !(0.0..0.5).contains(&beta) {
                    return Err(SimError::Config(format!(
                        "trimmed_mean: beta must lie in [0, 0.5), got {beta}"
                    )));
                }
                let m = (beta * n_clients as f64).floor() as usize;
                if n_clients <= 2 * m {
                    return Err(SimError::Config(format!(
                        "trimmed_mean: N - 2*floor(beta*N) >= 1 violated (N={n_clients}, beta={beta})"
                    )));
                }
                Ok(())
            }
            Aggregator::Krum { f_max } | Aggregator::MultiKrum { f_max, .. } => {
                if n_clients < f_max + 3 {
                    return Err(SimError::Config(format!(
                        "krum: N >= f+3 violated (N={n_clients}, f={f_max})"
                    )));
                }
                if let Aggregator::MultiKrum { k_select, .. } = *self {
                    if k_select == 0 {
                        return Err(SimError::Config(
                            "multi_krum: k_select must be >= 1".into(),
                        ));
                    }
                }
                Ok(())
            }
            Aggregator::FedGreed { k_cap } => {
                if let Some(k) = k_cap {
                    if k == 0 || k > n_clients {
                        return Err(SimError::Config(format!(
                            "fed_greed: k_cap must lie in [1, N] (N={n_clients}, k_cap={k})"
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

fn check_cohort(updates: &[ParamVector]) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| SimError::InvalidInput("aggregation over an empty update list".into()))?;
    let dim = first.len();
    if updates.iter().any(|u| u.len() != dim) {
        return Err(SimError::Config(
            "aggregation requires equal-length update vectors".into(),
        ));
    }
    Ok(dim)
}

/// `sum_i w_i x_i / sum_i w_i`, coordinate-wise.
pub fn mean_weighted(updates: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let dim = check_cohort(updates)?;
    if weights.len() != updates.len() {
        return Err(SimError::Config(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(SimError::Config(format!(
            "weights must be positive with a positive sum, got sum {total}"
        )));
    }
    // Normalize first so a lone client passes through exactly.
    let mut out = vec![0.0; dim];
    for (update, &w) in updates.iter().zip(weights) {
        let share = w / total;
        for (o, &x) in out.iter_mut().zip(update.iter()) {
            *o += share * x;
        }
    }
    Ok(ParamVector::from_vec(out))
}

/// Per coordinate: sort the N values, drop the `floor(beta*N)` smallest and
/// largest, and average the rest.
pub fn trimmed_mean(updates: &[ParamVector], beta: f64) -> Result<ParamVector> {
    let dim = check_cohort(updates)?;
    let n = updates.len();
    if !(0.0..0.5).contains(&beta) {
        return Err(SimError::Config(format!(
            "trimmed_mean: beta must lie in [0, 0.5), got {beta}"
        )));
    }
    let m = (beta * n as f64).floor() as usize;
    if n <= 2 * m {
        return Err(SimError::Config(format!(
            "trimmed_mean: trimming {m} from each tail of {n} values leaves nothing"
        )));
    }
    if m == 0 {
        // Nothing to trim; take the exact unweighted-mean path.
        return mean_weighted(updates, &vec![1.0; n]);
    }
    let mut out = Vec::with_capacity(dim);
    let mut column = vec![0.0; n];
    for coord in 0..dim {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u[coord];
        }
        column.sort_by(f64::total_cmp);
        let kept = &column[m..n - m];
        out.push(kept.iter().sum::<f64>() / kept.len() as f64);
    }
    Ok(ParamVector::from_vec(out))
}

/// Per-coordinate median; an even count averages the two middle values.
pub fn coordinate_median(updates: &[ParamVector]) -> Result<ParamVector> {
    let dim = check_cohort(updates)?;
    let n = updates.len();
    let mut out = Vec::with_capacity(dim);
    let mut column = vec![0.0; n];
    for coord in 0..dim {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u[coord];
        }
        column.sort_by(f64::total_cmp);
        out.push(if n.is_multiple_of(2) {
            0.5 * (column[n / 2 - 1] + column[n / 2])
        } else {
            column[n / 2]
        });
    }
    Ok(ParamVector::from_vec(out))
}

/// Krum score per client: the sum of its `N - f_max - 2` smallest squared
/// distances to the other updates.
pub fn krum_scores(updates: &[ParamVector], f_max: usize) -> Result<Vec<f64>> {
    check_cohort(updates)?;
    let n = updates.len();
    if n < f_max + 3 {
        return Err(SimError::Config(format!(
            "krum: N >= f+3 violated (N={n}, f={f_max})"
        )));
    }
    let neighbors = n - f_max - 2;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| updates[i].dist_sq(&updates[j]))
            .collect();
        dists.sort_by(f64::total_cmp);
        scores.push(dists[..neighbors].iter().sum());
    }
    Ok(scores)
}

fn krum_ranking(updates: &[ParamVector], f_max: usize) -> Result<Vec<usize>> {
    let scores = krum_scores(updates, f_max)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Score ties break toward the lowest client index.
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(order)
}

/// The update with the lowest Krum score; ties break by client index.
pub fn krum_select(updates: &[ParamVector], f_max: usize) -> Result<ParamVector> {
    let order = krum_ranking(updates, f_max)?;
    Ok(updates[order[0]].clone())
}

/// Multi-Krum result: the unweighted mean of the selected updates.
#[derive(Debug, Clone)]
pub struct MultiKrumOutcome {
    pub aggregate: ParamVector,
    /// Client ids whose updates were averaged, in score order.
    pub selected: Vec<usize>,
    /// Set when `k_select` exceeded `N - f_max - 2` and was clamped.
    pub clamped: bool,
}

/// Averages the `k_select` lowest-score updates.
///
/// A `k_select` above `N - f_max - 2` is clamped to `max(1, N - f_max - 2)`
/// and flagged; this keeps cohorts with large declared adversary counts
/// runnable.
pub fn multi_krum(
    updates: &[ParamVector],
    f_max: usize,
    k_select: usize,
) -> Result<MultiKrumOutcome> {
    if k_select == 0 {
        return Err(SimError::Config("multi_krum: k_select must be >= 1".into()));
    }
    let order = krum_ranking(updates, f_max)?;
    let n = updates.len();
    let limit = (n - f_max - 2).max(1);
    let clamped = k_select > limit;
    let k = k_select.min(limit);
    let selected: Vec<usize> = order[..k].to_vec();
    let chosen: Vec<ParamVector> = selected.iter().map(|&i| updates[i].clone()).collect();
    let aggregate = mean_weighted(&chosen, &vec![1.0; k])?;
    Ok(MultiKrumOutcome {
        aggregate,
        selected,
        clamped,
    })
}

/// Telemetry of one FedGreed invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyTrace {
    /// Client ids in evaluation-loss order (ties by ascending id).
    pub sorted_client_ids: Vec<usize>,
    /// Evaluation losses aligned with `sorted_client_ids`; non-decreasing
    /// once non-finite values are read as +inf.
    pub losses: Vec<f64>,
    /// Final prefix size: how many sorted models were averaged.
    pub stop_j: usize,
    /// Evaluator values of the accepted prefixes, starting with the best
    /// individual model; strictly decreasing after the first entry.
    pub candidate_losses: Vec<f64>,
}

/// Non-finite losses sort last, as if +inf.
fn loss_key(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Loss-ordered greedy prefix aggregation.
///
/// Scores every update with `server_loss`, sorts ascending (non-finite last,
/// ties by client id), then walks prefixes: the candidate
/// `x_test = ((j-1)/j) * x_aux + (1/j) * x_hat_(j)` replaces the running
/// average only while the evaluator strictly improves, stopping at the first
/// non-improvement or at prefix size `min(N, k_cap)`. The result never
/// evaluates worse than the best individual update.
pub fn fed_greed<F>(
    updates: &[ParamVector],
    server_loss: F,
    k_cap: usize,
) -> Result<(ParamVector, GreedyTrace)>
where
    F: Fn(&ParamVector) -> f64,
{
    check_cohort(updates)?;
    let n = updates.len();
    let losses_by_client: Vec<f64> = updates.iter().map(&server_loss).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        loss_key(losses_by_client[a])
            .total_cmp(&loss_key(losses_by_client[b]))
            .then(a.cmp(&b))
    });
    let sorted_losses: Vec<f64> = order.iter().map(|&i| losses_by_client[i]).collect();

    let cap = k_cap.clamp(1, n);
    let mut aux = updates[order[0]].clone();
    let mut aux_loss = sorted_losses[0];
    let mut candidate_losses = vec![aux_loss];
    let mut stop_j = 1;

    for j in 2..=cap {
        let next = &updates[order[j - 1]];
        let jf = j as f64;
        let test = ParamVector::scale_add((jf - 1.0) / jf, &aux, 1.0 / jf, next);
        let test_loss = server_loss(&test);
        if loss_key(test_loss) >= loss_key(aux_loss) {
            break;
        }
        aux = test;
        aux_loss = test_loss;
        candidate_losses.push(test_loss);
        stop_j = j;
    }

    Ok((
        aux,
        GreedyTrace {
            sorted_client_ids: order,
            losses: sorted_losses,
            stop_j,
            candidate_losses,
        },
    ))
}

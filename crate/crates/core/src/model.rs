//! Model parameters, differentiable loss oracles, and local optimizers.
//!
//! Two model kinds are supported, both operating on flat parameter vectors:
//! multinomial softmax regression and a one-hidden-layer tanh MLP with
//! hand-written backprop. The loss is mean cross-entropy over the batch plus
//! an optional L2 term `0.5 * l2 * ||params||^2`.

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::Result;

/// Flat real-valued model parameter vector of fixed dimension.
///
/// All arithmetic requires equal lengths. Honest-path operations map finite
/// inputs to finite outputs; non-finite values only enter through attacks and
/// are propagated untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Squared Euclidean norm.
    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }

    /// Squared Euclidean distance to another vector of the same length.
    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Coordinate-wise `a * x + b * y`.
    pub fn scale_add(a: f64, x: &ParamVector, b: f64, y: &ParamVector) -> ParamVector {
        debug_assert_eq!(x.len(), y.len());
        ParamVector(
            x.0.iter()
                .zip(y.0.iter())
                .map(|(xi, yi)| a * xi + b * yi)
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Feature matrix plus integer class labels.
///
/// Features are stored row-major; every label lies in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(SimError::InvalidInput("num_classes must be positive".into()));
        }
        if n_features == 0 {
            return Err(SimError::InvalidInput("n_features must be positive".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(SimError::InvalidInput(format!(
                "feature matrix has {} values but {} labels x {} features require {}",
                features.len(),
                labels.len(),
                n_features,
                labels.len() * n_features
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(SimError::InvalidInput(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            n_features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            n_features: self.n_features,
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Same data with a different declared class count.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(SimError::InvalidInput(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Replaces the labels wholesale; used by the label-flipping attack.
    pub(crate) fn with_labels(&self, labels: Vec<usize>) -> Dataset {
        debug_assert_eq!(labels.len(), self.labels.len());
        Dataset {
            features: self.features.clone(),
            n_features: self.n_features,
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Which differentiable model a [`LossOracle`] realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    SoftmaxRegression,
    Mlp1Hidden,
}

/// A differentiable model definition mapping (params, data) to loss,
/// gradient, and predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOracle {
    kind: ModelKind,
    n_features: usize,
    hidden: usize,
    num_classes: usize,
    l2: f64,
}

impl LossOracle {
    pub fn softmax_regression(n_features: usize, num_classes: usize, l2: f64) -> Self {
        LossOracle {
            kind: ModelKind::SoftmaxRegression,
            n_features,
            hidden: 0,
            num_classes,
            l2,
        }
    }

    pub fn mlp(n_features: usize, hidden: usize, num_classes: usize, l2: f64) -> Self {
        assert!(hidden > 0, "MLP hidden width must be positive");
        LossOracle {
            kind: ModelKind::Mlp1Hidden,
            n_features,
            hidden,
            num_classes,
            l2,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Total parameter dimension `d` for this model.
    ///
    /// Softmax regression packs `[W (C x F), b (C)]`; the MLP packs
    /// `[W1 (H x F), b1 (H), W2 (C x H), b2 (C)]`, all row-major.
    pub fn param_dim(&self) -> usize {
        let f = self.n_features;
        let c = self.num_classes;
        match self.kind {
            ModelKind::SoftmaxRegression => c * f + c,
            ModelKind::Mlp1Hidden => {
                let h = self.hidden;
                h * f + h + c * h + c
            }
        }
    }

    fn check_inputs(&self, params: &ParamVector, data: &Dataset) -> Result<()> {
        if params.len() != self.param_dim() {
            return Err(SimError::Config(format!(
                "parameter vector has length {} but the model requires {}",
                params.len(),
                self.param_dim()
            )));
        }
        if data.n_features() != self.n_features || data.num_classes() != self.num_classes {
            return Err(SimError::Config(format!(
                "dataset shape ({} features, {} classes) does not match model ({}, {})",
                data.n_features(),
                data.num_classes(),
                self.n_features,
                self.num_classes
            )));
        }
        if data.is_empty() {
            return Err(SimError::InvalidInput(
                "loss requires a non-empty dataset".into(),
            ));
        }
        Ok(())
    }

    /// Class logits for one sample.
    fn logits(&self, params: &ParamVector, x: &[f64], scratch_hidden: &mut Vec<f64>) -> Vec<f64> {
        let p = params.as_slice();
        let f = self.n_features;
        let c = self.num_classes;
        match self.kind {
            ModelKind::SoftmaxRegression => {
                let bias = &p[c * f..];
                (0..c)
                    .map(|k| {
                        let row = &p[k * f..(k + 1) * f];
                        dot(row, x) + bias[k]
                    })
                    .collect()
            }
            ModelKind::Mlp1Hidden => {
                let h = self.hidden;
                let (w1, rest) = p.split_at(h * f);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                scratch_hidden.clear();
                scratch_hidden
                    .extend((0..h).map(|j| (dot(&w1[j * f..(j + 1) * f], x) + b1[j]).tanh()));
                (0..c)
                    .map(|k| dot(&w2[k * h..(k + 1) * h], scratch_hidden) + b2[k])
                    .collect()
            }
        }
    }

    /// Mean cross-entropy over the batch plus the L2 term. Deterministic.
    pub fn loss(&self, params: &ParamVector, data: &Dataset) -> Result<f64> {
        self.check_inputs(params, data)?;
        let mut hidden = Vec::new();
        let mut total = 0.0;
        for i in 0..data.len() {
            let logits = self.logits(params, data.row(i), &mut hidden);
            total += cross_entropy(&logits, data.label(i));
        }
        Ok(total / data.len() as f64 + 0.5 * self.l2 * params.norm_sq())
    }

    /// Exact analytic gradient of [`Self::loss`] over the given batch.
    pub fn gradient(&self, params: &ParamVector, data: &Dataset) -> Result<ParamVector> {
        self.check_inputs(params, data)?;
        let p = params.as_slice();
        let f = self.n_features;
        let c = self.num_classes;
        let n = data.len() as f64;
        let mut grad = vec![0.0; params.len()];
        let mut hidden = Vec::new();

        match self.kind {
            ModelKind::SoftmaxRegression => {
                for i in 0..data.len() {
                    let x = data.row(i);
                    let mut probs = self.logits(params, x, &mut hidden);
                    softmax_in_place(&mut probs);
                    probs[data.label(i)] -= 1.0;
                    for (k, &delta) in probs.iter().enumerate() {
                        let row = &mut grad[k * f..(k + 1) * f];
                        for (g, &xv) in row.iter_mut().zip(x) {
                            *g += delta * xv;
                        }
                        grad[c * f + k] += delta;
                    }
                }
            }
            ModelKind::Mlp1Hidden => {
                let h = self.hidden;
                let w1_len = h * f;
                let (_, rest) = p.split_at(w1_len);
                let (_, rest) = rest.split_at(h);
                let (w2, _) = rest.split_at(c * h);
                let off_b1 = w1_len;
                let off_w2 = w1_len + h;
                let off_b2 = off_w2 + c * h;

                for i in 0..data.len() {
                    let x = data.row(i);
                    let mut probs = self.logits(params, x, &mut hidden);
                    softmax_in_place(&mut probs);
                    probs[data.label(i)] -= 1.0;

                    // Output layer: dW2[k][j] = dz_k * h_j, db2[k] = dz_k.
                    for (k, &dz) in probs.iter().enumerate() {
                        let row = &mut grad[off_w2 + k * h..off_w2 + (k + 1) * h];
                        for (g, &hv) in row.iter_mut().zip(hidden.iter()) {
                            *g += dz * hv;
                        }
                        grad[off_b2 + k] += dz;
                    }

                    // Hidden layer: da_j = (1 - h_j^2) * sum_k dz_k * W2[k][j].
                    for j in 0..h {
                        let mut dh = 0.0;
                        for (k, &dz) in probs.iter().enumerate() {
                            dh += dz * w2[k * h + j];
                        }
                        let da = dh * (1.0 - hidden[j] * hidden[j]);
                        let row = &mut grad[j * f..(j + 1) * f];
                        for (g, &xv) in row.iter_mut().zip(x) {
                            *g += da * xv;
                        }
                        grad[off_b1 + j] += da;
                    }
                }
            }
        }

        for (g, &w) in grad.iter_mut().zip(p) {
            *g = *g / n + self.l2 * w;
        }
        Ok(ParamVector::from_vec(grad))
    }

    /// Fraction of argmax-class predictions equal to the labels.
    ///
    /// Argmax ties break toward the lowest class index, so accuracy is
    /// deterministic.
    pub fn accuracy(&self, params: &ParamVector, data: &Dataset) -> Result<f64> {
        self.check_inputs(params, data)?;
        let mut hidden = Vec::new();
        let mut correct = 0usize;
        for i in 0..data.len() {
            let logits = self.logits(params, data.row(i), &mut hidden);
            if argmax_lowest_tie(&logits) == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-ln softmax(logits)[label]` via a numerically stable log-sum-exp.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    lse - logits[label]
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

fn argmax_lowest_tie(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Local optimizer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Hyperparameters shared by every fresh optimizer instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerSpec {
    /// Adam with the conventional defaults.
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
        }
    }
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::adam(0.001)
    }
}

/// Mutable optimizer state: moments and the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    spec: OptimizerSpec,
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
}

impl OptimizerState {
    /// Fresh state with zero-initialized moments.
    pub fn new(spec: OptimizerSpec, dim: usize) -> Self {
        let moments = match spec.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => dim,
        };
        OptimizerState {
            spec,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimizer step; returns the updated parameters and advances the
    /// moments and step counter.
    ///
    /// Non-finite gradients are not filtered: attacked values propagate.
    pub fn step(&mut self, params: &ParamVector, grad: &ParamVector) -> Result<ParamVector> {
        if params.len() != grad.len() {
            return Err(SimError::Config(format!(
                "optimizer step shape mismatch: params {}, grad {}",
                params.len(),
                grad.len()
            )));
        }
        self.step_count += 1;
        let lr = self.spec.learning_rate;
        match self.spec.kind {
            OptimizerKind::Sgd => Ok(ParamVector::scale_add(1.0, params, -lr, grad)),
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.spec.beta1, self.spec.beta2, self.spec.epsilon);
                let t = self.step_count as i32;
                let bc1 = 1.0 - b1.powi(t);
                let bc2 = 1.0 - b2.powi(t);
                let mut out = Vec::with_capacity(params.len());
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    out.push(params[i] - lr * m_hat / (v_hat.sqrt() + eps));
                }
                Ok(ParamVector::from_vec(out))
            }
        }
    }
}

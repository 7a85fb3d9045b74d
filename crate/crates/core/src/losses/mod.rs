//! Loss models with exact analytic gradients.
//!
//! Three kinds are supported: a data-free quadratic (closed-form minimizers,
//! used to test exactness properties), multiclass logistic regression and a
//! one-hidden-layer ReLU perceptron. All losses are means over the shard plus
//! `(weight_decay / 2) * ||params||^2`.

mod logistic;
mod mlp;
mod quadratic;

pub use logistic::LogisticModel;
pub use mlp::MlpModel;
pub use quadratic::{symmetric_eigen_bounds, QuadraticLoss};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::param::ParamVector;
use crate::seed;

/// Labeled samples held by one device (or the test split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataShard {
    features: Vec<f64>,
    num_features: usize,
    labels: Vec<usize>,
}

impl DataShard {
    /// `features` is row-major `labels.len() x num_features`.
    pub fn new(features: Vec<f64>, num_features: usize, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() * num_features {
            return Err(FedError::Contract(format!(
                "feature buffer of length {} does not hold {} rows of {} features",
                features.len(),
                labels.len(),
                num_features
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Contract("non-finite feature value".into()));
        }
        Ok(DataShard {
            features,
            num_features,
            labels,
        })
    }

    pub fn empty(num_features: usize) -> Self {
        DataShard {
            features: Vec::new(),
            num_features,
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Copy the given rows, in order, into a new shard.
    pub fn select(&self, indices: &[usize]) -> DataShard {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        DataShard {
            features,
            num_features: self.num_features,
            labels,
        }
    }

    /// Concatenate shards with the same feature width.
    pub fn concat<'a>(num_features: usize, shards: impl IntoIterator<Item = &'a DataShard>) -> DataShard {
        let mut out = DataShard::empty(num_features);
        for s in shards {
            debug_assert_eq!(s.num_features, num_features);
            out.features.extend_from_slice(&s.features);
            out.labels.extend_from_slice(&s.labels);
        }
        out
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &y in &self.labels {
            if y < classes {
                h[y] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Quadratic,
    MulticlassLogistic,
    TwoLayerMlp,
}

/// An evaluable, differentiable empirical loss.
#[derive(Debug, Clone, PartialEq)]
pub enum LossModel {
    Quadratic(QuadraticLoss),
    Logistic(LogisticModel),
    Mlp(MlpModel),
}

impl LossModel {
    pub fn kind(&self) -> LossKind {
        match self {
            LossModel::Quadratic(_) => LossKind::Quadratic,
            LossModel::Logistic(_) => LossKind::MulticlassLogistic,
            LossModel::Mlp(_) => LossKind::TwoLayerMlp,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LossModel::Quadratic(q) => q.dim(),
            LossModel::Logistic(l) => l.dim(),
            LossModel::Mlp(m) => m.dim(),
        }
    }

    pub fn weight_decay(&self) -> f64 {
        match self {
            LossModel::Quadratic(q) => q.weight_decay,
            LossModel::Logistic(l) => l.weight_decay,
            LossModel::Mlp(m) => m.weight_decay,
        }
    }

    /// Number of classes for classifiers; `None` for the quadratic.
    pub fn classes(&self) -> Option<usize> {
        match self {
            LossModel::Quadratic(_) => None,
            LossModel::Logistic(l) => Some(l.classes),
            LossModel::Mlp(m) => Some(m.classes),
        }
    }

    pub fn as_quadratic(&self) -> Option<&QuadraticLoss> {
        match self {
            LossModel::Quadratic(q) => Some(q),
            _ => None,
        }
    }

    fn validate(&self, params: &ParamVector, shard: &DataShard) -> Result<()> {
        params.check_dim(self.dim())?;
        if !params.is_finite() {
            return Err(FedError::Contract("non-finite parameters".into()));
        }
        match self {
            LossModel::Quadratic(_) => Ok(()),
            LossModel::Logistic(LogisticModel { features, classes, .. })
            | LossModel::Mlp(MlpModel { features, classes, .. }) => {
                if shard.is_empty() {
                    return Err(FedError::EmptyShard(match self {
                        LossModel::Logistic(_) => "multiclass logistic loss",
                        _ => "two-layer MLP loss",
                    }));
                }
                if shard.num_features() != *features {
                    return Err(FedError::DimensionMismatch {
                        expected: *features,
                        got: shard.num_features(),
                    });
                }
                if let Some(&label) = shard.labels().iter().find(|&&y| y >= *classes) {
                    return Err(FedError::LabelOutOfRange {
                        label,
                        classes: *classes,
                    });
                }
                Ok(())
            }
        }
    }

    /// Sum of per-sample losses and gradients over `rows`, without weight decay.
    fn accumulate(&self, params: &[f64], shard: &DataShard, rows: &[usize], grad: &mut [f64]) -> f64 {
        match self {
            LossModel::Quadratic(_) => unreachable!("quadratic loss is data-free"),
            LossModel::Logistic(l) => rows
                .iter()
                .map(|&i| l.sample_loss_grad(params, shard.row(i), shard.label(i), grad))
                .sum(),
            LossModel::Mlp(m) => {
                let mut scratch = m.scratch();
                rows.iter()
                    .map(|&i| m.sample_loss_grad(params, shard.row(i), shard.label(i), grad, &mut scratch))
                    .sum()
            }
        }
    }

    fn mean_loss_grad(&self, params: &ParamVector, shard: &DataShard, rows: &[usize]) -> (f64, ParamVector) {
        if let LossModel::Quadratic(q) = self {
            return (q.value(params), q.gradient(params));
        }
        let wd = self.weight_decay();
        let mut grad = vec![0.0; self.dim()];
        let total = self.accumulate(params.as_slice(), shard, rows, &mut grad);
        let inv = 1.0 / rows.len() as f64;
        for (g, p) in grad.iter_mut().zip(params.iter()) {
            *g = *g * inv + wd * p;
        }
        (total * inv + 0.5 * wd * params.norm_sq(), ParamVector::from_vec(grad))
    }

    pub fn loss_value(&self, params: &ParamVector, shard: &DataShard) -> Result<f64> {
        self.validate(params, shard)?;
        if let LossModel::Quadratic(q) = self {
            return Ok(q.value(params));
        }
        let p = params.as_slice();
        let total: f64 = match self {
            LossModel::Logistic(l) => (0..shard.len())
                .map(|i| l.sample_loss(p, shard.row(i), shard.label(i)))
                .sum(),
            LossModel::Mlp(m) => {
                let mut scratch = m.scratch();
                (0..shard.len())
                    .map(|i| m.sample_loss(p, shard.row(i), shard.label(i), &mut scratch))
                    .sum()
            }
            LossModel::Quadratic(_) => unreachable!(),
        };
        Ok(total / shard.len() as f64 + 0.5 * self.weight_decay() * params.norm_sq())
    }

    pub fn loss_gradient(&self, params: &ParamVector, shard: &DataShard) -> Result<ParamVector> {
        Ok(self.loss_and_gradient(params, shard)?.1)
    }

    pub fn loss_and_gradient(&self, params: &ParamVector, shard: &DataShard) -> Result<(f64, ParamVector)> {
        self.validate(params, shard)?;
        let rows: Vec<usize> = (0..shard.len()).collect();
        Ok(self.mean_loss_grad(params, shard, &rows))
    }

    /// Mini-batch gradient over the given rows (mean + weight decay).
    /// The quadratic ignores `rows` and returns its full gradient.
    pub fn batch_gradient(&self, params: &ParamVector, shard: &DataShard, rows: &[usize]) -> Result<ParamVector> {
        self.validate(params, shard)?;
        if rows.is_empty() && self.kind() != LossKind::Quadratic {
            return Err(FedError::Contract("empty mini-batch".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= shard.len()) {
            if self.kind() != LossKind::Quadratic {
                return Err(FedError::Contract(format!("row {bad} out of range")));
            }
        }
        Ok(self.mean_loss_grad(params, shard, rows).1)
    }

    /// Class scores for one feature row; `None` for the quadratic.
    pub fn predict(&self, params: &ParamVector, x: &[f64]) -> Option<usize> {
        let scores = match self {
            LossModel::Quadratic(_) => return None,
            LossModel::Logistic(l) => l.scores(params.as_slice(), x),
            LossModel::Mlp(m) => m.scores(params.as_slice(), x, &mut m.scratch()),
        };
        Some(argmax(&scores))
    }

    /// Fraction of correctly classified rows. `None` for the quadratic or an
    /// empty shard.
    pub fn accuracy(&self, params: &ParamVector, shard: &DataShard) -> Result<Option<f64>> {
        params.check_dim(self.dim())?;
        if self.kind() == LossKind::Quadratic || shard.is_empty() {
            return Ok(None);
        }
        let correct = (0..shard.len())
            .filter(|&i| self.predict(params, shard.row(i)) == Some(shard.label(i)))
            .count();
        Ok(Some(correct as f64 / shard.len() as f64))
    }

    /// Initial parameters: zeros for the quadratic and logistic models,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for the perceptron.
    pub fn init_params(&self, seed_value: u64) -> ParamVector {
        match self {
            LossModel::Quadratic(_) | LossModel::Logistic(_) => ParamVector::zeros(self.dim()),
            LossModel::Mlp(m) => {
                let mut rng = seed::stream(seed_value, &[seed::domain::INIT]);
                let mut v = Vec::with_capacity(m.dim());
                let b1 = 1.0 / (m.features as f64).sqrt();
                let b2 = 1.0 / (m.hidden as f64).sqrt();
                for _ in 0..m.hidden * m.features + m.hidden {
                    v.push(rng.random_range(-b1..b1));
                }
                for _ in 0..m.classes * m.hidden + m.classes {
                    v.push(rng.random_range(-b2..b2));
                }
                ParamVector::from_vec(v)
            }
        }
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `log(sum(exp(z)))` with max subtraction.
pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max over coordinates of `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn fd_gradient_check(model: &LossModel, params: &ParamVector, shard: &DataShard, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(FedError::Contract("finite-difference step must be positive".into()));
    }
    let analytic = model.loss_gradient(params, shard)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = model.loss_value(&probe, shard)?;
        probe[i] = orig - step;
        let down = model.loss_value(&probe, shard)?;
        probe[i] = orig;
        let central = (up - down) / (2.0 * step);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;

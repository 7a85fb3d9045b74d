//! Per-device objectives and the federation that groups them.

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::datagen::{hex_digest, FederatedDataset};
use crate::error::{FedError, Result};
use crate::losses::{DataShard, LossModel, QuadraticLoss};
use crate::param::ParamVector;

/// `L_k`: one device's loss model and its data.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalObjective {
    pub model: LossModel,
    pub shard: DataShard,
}

impl LocalObjective {
    pub fn new(model: LossModel, shard: DataShard) -> Self {
        LocalObjective { model, shard }
    }

    pub fn quadratic(q: QuadraticLoss) -> Self {
        LocalObjective {
            model: LossModel::Quadratic(q),
            shard: DataShard::empty(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn value(&self, theta: &ParamVector) -> Result<f64> {
        self.model.loss_value(theta, &self.shard)
    }

    pub fn gradient(&self, theta: &ParamVector) -> Result<ParamVector> {
        self.model.loss_gradient(theta, &self.shard)
    }

    /// Samples available for mini-batching; zero for data-free losses.
    pub fn num_samples(&self) -> usize {
        match self.model {
            LossModel::Quadratic(_) => 0,
            _ => self.shard.len(),
        }
    }

    pub fn batch_gradient(&self, theta: &ParamVector, rows: &[usize]) -> Result<ParamVector> {
        self.model.batch_gradient(theta, &self.shard, rows)
    }

    /// Upper bound on the gradient's Lipschitz constant when one is known.
    pub fn smoothness_bound(&self) -> Option<f64> {
        match &self.model {
            LossModel::Quadratic(q) => Some(q.smoothness()),
            LossModel::Logistic(l) => Some(l.smoothness_bound(&self.shard)),
            LossModel::Mlp(_) => None,
        }
    }
}

/// Global optimum of a quadratic federation, computed in closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticOptimum {
    pub theta: ParamVector,
    pub loss: f64,
    /// Smallest strong-convexity constant over devices.
    pub mu: f64,
    /// Largest smoothness constant over devices.
    pub smoothness: f64,
}

/// The `m` device objectives plus a held-out test shard.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    devices: Vec<LocalObjective>,
    test: DataShard,
}

impl Federation {
    pub fn new(devices: Vec<LocalObjective>, test: DataShard) -> Result<Self> {
        let first = devices
            .first()
            .ok_or_else(|| FedError::config("a federation needs at least one device"))?;
        let d = first.dim();
        if let Some(bad) = devices.iter().find(|o| o.dim() != d) {
            return Err(FedError::DimensionMismatch {
                expected: d,
                got: bad.dim(),
            });
        }
        Ok(Federation { devices, test })
    }

    /// One shared classifier over every shard of a dataset.
    pub fn from_dataset(model: LossModel, data: &FederatedDataset) -> Result<Self> {
        if let Some(classes) = model.classes() {
            if classes < data.classes {
                return Err(FedError::config(format!(
                    "model has {classes} classes but the data has {}",
                    data.classes
                )));
            }
        }
        let devices = data
            .shards
            .iter()
            .map(|s| LocalObjective::new(model.clone(), s.clone()))
            .collect();
        Federation::new(devices, data.test.clone())
    }

    pub fn from_quadratics(qs: Vec<QuadraticLoss>) -> Result<Self> {
        Federation::new(qs.into_iter().map(LocalObjective::quadratic).collect(), DataShard::empty(0))
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn dim(&self) -> usize {
        self.devices[0].dim()
    }

    pub fn device(&self, k: usize) -> &LocalObjective {
        &self.devices[k]
    }

    pub fn devices(&self) -> &[LocalObjective] {
        &self.devices
    }

    pub fn test(&self) -> &DataShard {
        &self.test
    }

    /// The model that scores the test shard (the first device's).
    pub fn reference_model(&self) -> &LossModel {
        &self.devices[0].model
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        self.reference_model().init_params(seed)
    }

    /// `argmin_θ (1/m) Σ_k L_k(θ)` by solving `(Σ H_k) θ = Σ b_k`, when every
    /// device is quadratic.
    pub fn quadratic_optimum(&self) -> Option<QuadraticOptimum> {
        let d = self.dim();
        let mut h = DMatrix::<f64>::zeros(d, d);
        let mut b = DVector::<f64>::zeros(d);
        let mut mu = f64::INFINITY;
        let mut smoothness = 0.0f64;
        for obj in &self.devices {
            let q = obj.model.as_quadratic()?;
            h += q.hessian();
            b += DVector::from_column_slice(q.linear_term().as_slice());
            mu = mu.min(q.strong_convexity());
            smoothness = smoothness.max(q.smoothness());
        }
        let theta = h.clone().cholesky().map(|c| c.solve(&b)).or_else(|| h.lu().solve(&b))?;
        let theta = ParamVector::from_vec(theta.as_slice().to_vec());
        let loss = self
            .devices
            .iter()
            .map(|o| o.value(&theta).expect("dimension checked at construction"))
            .sum::<f64>()
            / self.devices.len() as f64;
        Some(QuadraticOptimum {
            theta,
            loss,
            mu,
            smoothness,
        })
    }

    /// SHA-256 over every device's model description and data.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let mut put = |v: f64| hasher.update(v.to_bits().to_le_bytes());
        for obj in &self.devices {
            match &obj.model {
                LossModel::Quadratic(q) => {
                    q.center.iter().for_each(|&v| put(v));
                    q.scale.iter().for_each(|&v| put(v));
                    put(q.weight_decay);
                }
                LossModel::Logistic(l) => {
                    put(l.features as f64);
                    put(l.classes as f64);
                    put(l.weight_decay);
                }
                LossModel::Mlp(m) => {
                    put(m.features as f64);
                    put(m.hidden as f64);
                    put(m.classes as f64);
                    put(m.weight_decay);
                }
            }
            put(obj.shard.len() as f64);
            obj.shard.features().iter().for_each(|&v| put(v));
            obj.shard.labels().iter().for_each(|&y| put(y as f64));
        }
        self.test.features().iter().for_each(|&v| put(v));
        self.test.labels().iter().for_each(|&y| put(y as f64));
        hex_digest(hasher)
    }
}

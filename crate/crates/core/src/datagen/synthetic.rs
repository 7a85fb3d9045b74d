use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{sample_unbalanced_sizes, FederatedDataset};
use crate::error::{FedError, Result};
use crate::losses::{argmax, DataShard};
use crate::seed::{self, domain};

/// Which heterogeneity source is active. The other two are disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeterogeneityMode {
    /// One shared optimal model, zero feature means, equal sizes.
    Homogeneous,
    /// Per-device optimal models.
    Type1,
    /// Per-device feature means.
    Type2,
    /// Lognormal device sizes.
    Type3,
}

/// Parameters of the argmax-linear synthetic benchmark.
///
/// `gamma1` and `gamma2` are variances of the per-device means; `gamma3` is
/// the standard deviation of the log of the device sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub devices: usize,
    pub avg_samples: usize,
    pub features: usize,
    pub classes: usize,
    #[serde(default = "one")]
    pub gamma1: f64,
    #[serde(default = "one")]
    pub gamma2: f64,
    #[serde(default = "one")]
    pub gamma3: f64,
    pub mode: HeterogeneityMode,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SyntheticConfig {
    /// Twenty devices, ~200 samples each, 30 features, 5 classes.
    pub fn standard(mode: HeterogeneityMode, seed: u64) -> Self {
        SyntheticConfig {
            devices: 20,
            avg_samples: 200,
            features: 30,
            classes: 5,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 1.0,
            mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices < 1 || self.avg_samples < 1 || self.features < 1 {
            return Err(FedError::config(
                "synthetic data needs devices >= 1, avg_samples >= 1, features >= 1",
            ));
        }
        if self.classes < 2 {
            return Err(FedError::config("synthetic data needs at least 2 classes"));
        }
        if [self.gamma1, self.gamma2, self.gamma3].iter().any(|g| !(*g >= 0.0)) {
            return Err(FedError::config("heterogeneity gammas must be nonnegative"));
        }
        Ok(())
    }
}

/// Diagonal feature covariance `k^{-1.2}`, `k = 1..=p`.
pub fn feature_variances(p: usize) -> Vec<f64> {
    (1..=p).map(|k| (k as f64).powf(-1.2)).collect()
}

fn normal<R: Rng>(rng: &mut R, mean: f64, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + std * z
}

/// Held-out samples generated per device: 10% of its training size, rounded up.
fn test_count(n: usize) -> usize {
    n.div_ceil(10)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<FederatedDataset> {
    Ok(generate_with_models(cfg)?.0)
}

/// The generated dataset together with each device's labeling model
/// (`W` row-major then `b`, the logistic parameter layout).
pub fn generate_with_models(cfg: &SyntheticConfig) -> Result<(FederatedDataset, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let (p, c) = (cfg.features, cfg.classes);
    let model_len = c * p + c;

    let mut shared_rng = seed::stream(cfg.seed, &[domain::SHARED_MODEL]);
    let shared_model: Vec<f64> = (0..model_len).map(|_| normal(&mut shared_rng, 0.0, 1.0)).collect();

    let sizes = if cfg.mode == HeterogeneityMode::Type3 {
        sample_unbalanced_sizes(
            cfg.devices,
            cfg.gamma3,
            cfg.devices * cfg.avg_samples,
            seed::derive(cfg.seed, &[domain::SIZES]),
        )?
    } else {
        vec![cfg.avg_samples; cfg.devices]
    };

    let stds: Vec<f64> = feature_variances(p).into_iter().map(f64::sqrt).collect();
    let mut shards = Vec::with_capacity(cfg.devices);
    let mut tests = Vec::with_capacity(cfg.devices);
    let mut models = Vec::with_capacity(cfg.devices);

    for (device, &n) in sizes.iter().enumerate() {
        let mut rng = seed::stream(cfg.seed, &[domain::DEVICE_DATA, device as u64]);

        let own_model;
        let model: &[f64] = if cfg.mode == HeterogeneityMode::Type1 {
            let mu = normal(&mut rng, 0.0, cfg.gamma1.sqrt());
            own_model = (0..model_len).map(|_| normal(&mut rng, mu, 1.0)).collect::<Vec<_>>();
            &own_model
        } else {
            &shared_model
        };

        let means: Vec<f64> = if cfg.mode == HeterogeneityMode::Type2 {
            let beta = normal(&mut rng, 0.0, cfg.gamma2.sqrt());
            (0..p).map(|_| normal(&mut rng, beta, 1.0)).collect()
        } else {
            vec![0.0; p]
        };

        let total = n + test_count(n);
        let mut features = Vec::with_capacity(total * p);
        let mut labels = Vec::with_capacity(total);
        let (weights, bias) = model.split_at(c * p);
        for _ in 0..total {
            let x: Vec<f64> = (0..p).map(|k| normal(&mut rng, means[k], stds[k])).collect();
            let scores: Vec<f64> = (0..c)
                .map(|cls| {
                    weights[cls * p..(cls + 1) * p]
                        .iter()
                        .zip(&x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
                        + bias[cls]
                })
                .collect();
            labels.push(argmax(&scores));
            features.extend(x);
        }
        models.push(model.to_vec());
        let test_features = features.split_off(n * p);
        let test_labels = labels.split_off(n);
        shards.push(DataShard::new(features, p, labels)?);
        tests.push(DataShard::new(test_features, p, test_labels)?);
    }

    let test = DataShard::concat(p, &tests);
    Ok((FederatedDataset::new(shards, test, c), models))
}

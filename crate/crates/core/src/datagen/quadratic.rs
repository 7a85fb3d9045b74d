use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::losses::QuadraticLoss;
use crate::param::ParamVector;
use crate::seed::{self, domain};

/// Per-device quadratics `½(θ - c_k)ᵀ S_k (θ - c_k)`.
///
/// Each `S_k = Q_k diag(λ) Q_kᵀ` with a random orthogonal `Q_k`; in two or
/// more dimensions the spectrum always contains both `mu` and `smoothness`,
/// so those are the exact strong-convexity and smoothness constants of every
/// device. Centers are `N(0, center_spread²)` per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticEnsembleConfig {
    pub devices: usize,
    pub dim: usize,
    pub mu: f64,
    pub smoothness: f64,
    #[serde(default = "one")]
    pub center_spread: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl QuadraticEnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 || self.dim == 0 {
            return Err(FedError::config("quadratic ensemble needs devices >= 1 and dim >= 1"));
        }
        if !(self.mu > 0.0) || !(self.smoothness >= self.mu) {
            return Err(FedError::config("quadratic ensemble needs 0 < mu <= smoothness"));
        }
        if !(self.center_spread >= 0.0) {
            return Err(FedError::config("center_spread must be nonnegative"));
        }
        Ok(())
    }
}

fn random_orthogonal<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

pub fn quadratic_ensemble(cfg: &QuadraticEnsembleConfig) -> Result<Vec<QuadraticLoss>> {
    cfg.validate()?;
    (0..cfg.devices)
        .map(|k| {
            let mut rng = seed::stream(cfg.seed, &[domain::ENSEMBLE, k as u64]);
            let spectrum: Vec<f64> = match cfg.dim {
                1 => vec![rng.random_range(cfg.mu..=cfg.smoothness)],
                d => (0..d)
                    .map(|i| match i {
                        0 => cfg.mu,
                        1 => cfg.smoothness,
                        _ => rng.random_range(cfg.mu..=cfg.smoothness),
                    })
                    .collect(),
            };
            let q = random_orthogonal(&mut rng, cfg.dim);
            let mut s = &q * DMatrix::from_diagonal(&DVector::from_vec(spectrum)) * q.transpose();
            // Symmetrize away roundoff from the product.
            s = (&s + s.transpose()) * 0.5;
            let center = (0..cfg.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    cfg.center_spread * z
                })
                .collect();
            QuadraticLoss::new(ParamVector::from_vec(center), s, 0.0)
        })
        .collect()
}

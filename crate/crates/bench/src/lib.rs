//! Shared fixtures for the criterion benches.

use fedsim_core::algorithms::{AlgorithmConfig, AlgorithmKind};
use fedsim_core::datagen::{generate_synthetic, quadratic_ensemble, HeterogeneityMode, QuadraticEnsembleConfig, SyntheticConfig};
use fedsim_core::federation::Federation;
use fedsim_core::localsolve::LocalSolverConfig;
use fedsim_core::losses::{DataShard, LogisticModel, LossModel, MlpModel};
use fedsim_core::simulator::RunConfig;

/// The standard 20-device synthetic benchmark under a given loss.
pub fn synthetic_federation(model: LossKindChoice) -> Federation {
    let data = generate_synthetic(&SyntheticConfig::standard(HeterogeneityMode::Type1, 1)).expect("valid config");
    let loss = match model {
        LossKindChoice::Logistic => LossModel::Logistic(LogisticModel::new(30, 5, 1e-5)),
        LossKindChoice::Mlp => LossModel::Mlp(MlpModel::new(30, 32, 5, 1e-4)),
    };
    Federation::from_dataset(loss, &data).expect("matching dimensions")
}

#[derive(Debug, Clone, Copy)]
pub enum LossKindChoice {
    Logistic,
    Mlp,
}

pub fn quadratic_federation(devices: usize, dim: usize) -> Federation {
    let qs = quadratic_ensemble(&QuadraticEnsembleConfig {
        devices,
        dim,
        mu: 0.1,
        smoothness: 1.0,
        center_spread: 1.0,
        seed: 0,
    })
    .expect("valid ensemble");
    Federation::from_quadratics(qs).expect("matching dimensions")
}

/// FedDyn at 10% participation with the given local solver.
pub fn feddyn_run(solver: LocalSolverConfig) -> RunConfig {
    let mut cfg = RunConfig::new(AlgorithmConfig::new(AlgorithmKind::FedDyn, solver).with_alpha(0.01));
    cfg.participation = 0.1;
    cfg
}

/// `n` one-feature rows with balanced labels over `classes`.
pub fn label_pool(n: usize, classes: usize) -> DataShard {
    DataShard::new(vec![0.0; n], 1, (0..n).map(|i| i % classes).collect()).expect("consistent shard")
}

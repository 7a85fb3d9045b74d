use std::path::Path;

use serde::{Deserialize, Serialize};

use fedsim_core::federation::Federation;
use fedsim_core::localsolve::SolverMethod;
use fedsim_core::losses::LossKind;
use fedsim_core::metrics::{reference_optimum, stationarity_norm};
use fedsim_core::simulator::{participants_per_round, DataSpec};
use fedsim_core::algorithms::AlgorithmKind;

use crate::config::Config;
use crate::error::{io_err, CliError};

/// Iteration cap for the full-gradient `ℓ*` computation on data-backed
/// federations.
pub const REFERENCE_MAX_ITERS: usize = 20_000;
pub const REFERENCE_TOL: f64 = 1e-12;
/// `|∇ℓ|` below which a numerical `ℓ*` is trusted.
pub const ORACLE_TRUST_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
    DataOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub run: u64,
}

/// Reference values of the global objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    /// `analytic` or `full_gd`.
    pub source: String,
    pub l_star: f64,
    /// `|∇ℓ|` at the reference point.
    pub stationarity_norm: f64,
    /// Whether `stationarity_norm` is small enough to trust `l_star`.
    pub converged: bool,
    pub mu: Option<f64>,
    pub smoothness: Option<f64>,
}

/// Everything needed to interpret and re-create one output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub version: String,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    /// The resolved config, overrides included, as TOML.
    pub config: String,
    pub overrides: Vec<String>,
    pub seeds: Seeds,
    /// Hash of every device's model and data.
    pub fingerprint: String,
    pub dataset_fingerprint: Option<String>,
    pub oracle: Option<Oracle>,
    pub participants_per_round: usize,
    /// Local steps per activation for each device, when fixed.
    pub local_steps: Option<Vec<usize>>,
    pub notes: Vec<String>,
}

pub fn data_seed(data: &DataSpec) -> u64 {
    match data {
        DataSpec::Synthetic(c) => c.seed,
        DataSpec::Csv(c) => c.seed,
        DataSpec::Quadratic(c) => c.seed,
    }
}

pub fn compute_oracle(fed: &Federation) -> Result<Option<Oracle>, CliError> {
    if let Some(opt) = fed.quadratic_optimum() {
        return Ok(Some(Oracle {
            source: "analytic".into(),
            l_star: opt.loss,
            stationarity_norm: stationarity_norm(fed, &opt.theta)?,
            converged: true,
            mu: Some(opt.mu),
            smoothness: Some(opt.smoothness),
        }));
    }
    reference_optimum(fed, REFERENCE_TOL, REFERENCE_MAX_ITERS)?
        .map(|(theta, l_star)| -> Result<Oracle, CliError> {
            let norm = stationarity_norm(fed, &theta)?;
            Ok(Oracle {
                source: "full_gd".into(),
                l_star,
                stationarity_norm: norm,
                converged: norm <= ORACLE_TRUST_NORM,
                mu: None,
                smoothness: None,
            })
        })
        .transpose()
}

fn local_steps(cfg: &Config, fed: &Federation) -> Option<Vec<usize>> {
    let alg = &cfg.experiment.run.algorithm;
    if alg.kind == AlgorithmKind::FedDynOneStep {
        return Some(vec![1; fed.num_devices()]);
    }
    (alg.solver.method == SolverMethod::Sgd).then(|| {
        fed.devices()
            .iter()
            .map(|d| alg.solver.resolved_steps(d.num_samples()))
            .collect()
    })
}

impl RunManifest {
    pub fn new(
        name: &str,
        cfg: &Config,
        overrides: &[String],
        fed: &Federation,
        dataset_fingerprint: Option<String>,
        oracle: Option<Oracle>,
    ) -> Result<Self, CliError> {
        let e = &cfg.experiment;
        let mut notes = Vec::new();
        if matches!(e.data, DataSpec::Synthetic(_)) {
            notes.push("synthetic test split: ceil(n_k / 10) extra samples per device, pooled".into());
        }
        if e.model.kind != LossKind::Quadratic && cfg.reference_optimum {
            notes.push(format!(
                "l_star from full gradient descent on the global objective (tol {REFERENCE_TOL:e}, at most {REFERENCE_MAX_ITERS} iterations)"
            ));
        }
        Ok(RunManifest {
            name: name.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Running,
            error: None,
            config: crate::config::emit(cfg)?,
            overrides: overrides.to_vec(),
            seeds: Seeds {
                data: data_seed(&e.data),
                run: e.run.seed,
            },
            fingerprint: fed.fingerprint(),
            dataset_fingerprint,
            oracle,
            participants_per_round: participants_per_round(fed.num_devices(), e.run.participation)?,
            local_steps: local_steps(cfg, fed),
            notes,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join("manifest.json"), self)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        read_json(&dir.join("manifest.json"))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("manifest types serialize");
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

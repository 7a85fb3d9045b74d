//! Round orchestration: participant sampling, parallel device updates,
//! fixed-order aggregation, evaluation and communication accounting.

use std::path::PathBuf;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{build_strategy, AlgorithmConfig, DeviceState, DeviceUpdate, ServerState, Strategy};
use crate::datagen::{
    generate_synthetic, load_csv_pool, partition_by_sizes, partition_dirichlet, partition_iid, quadratic_ensemble,
    sample_unbalanced_sizes, FederatedDataset, QuadraticEnsembleConfig, SyntheticConfig,
};
use crate::error::{FedError, Result};
use crate::federation::Federation;
use crate::localsolve::SolveContext;
use crate::losses::{DataShard, LogisticModel, LossKind, LossModel, MlpModel};
use crate::metrics::{evaluate_model, global_loss, ModelMetrics, RecordSink, RoundRecord};
use crate::param::ParamVector;
use crate::seed::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
    /// Random assignment with lognormal shard sizes.
    Unbalanced,
}

/// A labeled CSV pool split over devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDataSpec {
    pub features: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub test_features: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    pub devices: usize,
    #[serde(default = "default_partition")]
    pub partition: PartitionKind,
    #[serde(default = "default_prior")]
    pub dirichlet_prior: f64,
    /// Standard deviation of the log shard sizes for `unbalanced`.
    #[serde(default = "default_prior")]
    pub size_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_partition() -> PartitionKind {
    PartitionKind::Iid
}

fn default_prior() -> f64 {
    0.3
}

/// Where device objectives come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticConfig),
    Csv(CsvDataSpec),
    Quadratic(QuadraticEnsembleConfig),
}

impl DataSpec {
    pub fn num_devices(&self) -> usize {
        match self {
            DataSpec::Synthetic(c) => c.devices,
            DataSpec::Csv(c) => c.devices,
            DataSpec::Quadratic(c) => c.devices,
        }
    }

    /// Materialize the device shards (`None` for data-free quadratics).
    pub fn load(&self) -> Result<Option<FederatedDataset>> {
        match self {
            DataSpec::Synthetic(cfg) => generate_synthetic(cfg).map(Some),
            DataSpec::Quadratic(_) => Ok(None),
            DataSpec::Csv(c) => {
                let (pool, mut classes) = load_csv_pool(&c.features, &c.labels)?;
                let test = match (&c.test_features, &c.test_labels) {
                    (Some(f), Some(l)) => {
                        let (test, test_classes) = load_csv_pool(f, l)?;
                        classes = classes.max(test_classes);
                        test
                    }
                    (None, None) => DataShard::empty(pool.num_features()),
                    _ => return Err(FedError::config("test_features and test_labels must be given together")),
                };
                let mut data = match c.partition {
                    PartitionKind::Iid => partition_iid(&pool, classes, c.devices, c.seed)?,
                    PartitionKind::Dirichlet => partition_dirichlet(&pool, classes, c.devices, c.dirichlet_prior, c.seed)?,
                    PartitionKind::Unbalanced => {
                        let sizes = sample_unbalanced_sizes(c.devices, c.size_sigma, pool.len(), c.seed)?;
                        partition_by_sizes(&pool, classes, &sizes, c.seed)?
                    }
                };
                data.test = test;
                Ok(Some(data))
            }
        }
    }
}

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// Which loss the devices share, for data-backed sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: LossKind,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Defaults to 1e-4 for the classifiers and 0 for quadratics.
    #[serde(default)]
    pub weight_decay: Option<f64>,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

impl ModelSpec {
    pub fn new(kind: LossKind) -> Self {
        ModelSpec {
            kind,
            hidden: DEFAULT_HIDDEN,
            weight_decay: None,
        }
    }

    pub fn build(&self, features: usize, classes: usize) -> Result<LossModel> {
        let wd = self.weight_decay.unwrap_or(DEFAULT_WEIGHT_DECAY);
        if !(wd >= 0.0) {
            return Err(FedError::config("weight_decay must be nonnegative"));
        }
        match self.kind {
            LossKind::MulticlassLogistic => Ok(LossModel::Logistic(LogisticModel::new(features, classes, wd))),
            LossKind::TwoLayerMlp if self.hidden >= 1 => Ok(LossModel::Mlp(MlpModel::new(features, self.hidden, classes, wd))),
            LossKind::TwoLayerMlp => Err(FedError::config("hidden must be at least 1")),
            LossKind::Quadratic => Err(FedError::config("quadratic losses need the quadratic data source")),
        }
    }
}

/// Build the federation a data source and model describe. The dataset is
/// returned too when there is one.
pub fn build_federation(data: &DataSpec, model: &ModelSpec) -> Result<(Federation, Option<FederatedDataset>)> {
    match data {
        DataSpec::Quadratic(cfg) => {
            if model.kind != LossKind::Quadratic {
                return Err(FedError::config("the quadratic data source needs model kind `quadratic`"));
            }
            let mut qs = quadratic_ensemble(cfg)?;
            if let Some(wd) = model.weight_decay {
                if !(wd >= 0.0) {
                    return Err(FedError::config("weight_decay must be nonnegative"));
                }
                qs.iter_mut().for_each(|q| q.weight_decay = wd);
                let rebuilt: Result<Vec<_>> = qs
                    .into_iter()
                    .map(|q| crate::losses::QuadraticLoss::new(q.center, q.scale, wd))
                    .collect();
                qs = rebuilt?;
            }
            Ok((Federation::from_quadratics(qs)?, None))
        }
        _ => {
            let dataset = data.load()?.expect("data-backed source");
            let lm = model.build(dataset.shards[0].num_features(), dataset.classes)?;
            Ok((Federation::from_dataset(lm, &dataset)?, Some(dataset)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    ServerModel,
    AllDeviceAverage,
    #[default]
    Both,
}

pub const DEFAULT_ROUNDS: usize = 100;

/// Everything about a run except where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: AlgorithmConfig,
    #[serde(default = "default_participation")]
    pub participation: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub report_mode: ReportMode,
    /// Worker threads for device updates; 0 uses the global pool.
    #[serde(default)]
    pub workers: usize,
}

fn default_participation() -> f64 {
    1.0
}

fn default_rounds() -> usize {
    DEFAULT_ROUNDS
}

fn default_eval_every() -> usize {
    1
}

impl RunConfig {
    pub fn new(algorithm: AlgorithmConfig) -> Self {
        RunConfig {
            algorithm,
            participation: 1.0,
            rounds: DEFAULT_ROUNDS,
            eval_every: 1,
            seed: 0,
            report_mode: ReportMode::Both,
            workers: 0,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        participants_per_round(m, self.participation)?;
        if self.rounds < 1 {
            return Err(FedError::config("rounds must be at least 1"));
        }
        if self.eval_every < 1 {
            return Err(FedError::config("eval_every must be at least 1"));
        }
        self.algorithm.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub run: RunConfig,
}

/// `P = max(1, round(participation * m))`.
pub fn participants_per_round(m: usize, participation: f64) -> Result<usize> {
    if !(participation > 0.0 && participation <= 1.0) || m == 0 {
        return Err(FedError::config("participation must yield ≥1 device (need 0 < participation <= 1)"));
    }
    Ok(((participation * m as f64).round() as usize).clamp(1, m))
}

/// `P` distinct devices drawn uniformly, independently per round; sorted.
pub fn sample_participants(m: usize, p: usize, round: usize, seed_value: u64) -> Vec<usize> {
    assert!(1 <= p && p <= m, "need 1 <= P <= m");
    if p == m {
        return (0..m).collect();
    }
    let mut rng = seed::stream(seed_value, &[domain::PARTICIPANTS, round as u64]);
    let mut ids = index::sample(&mut rng, m, p).into_vec();
    ids.sort_unstable();
    ids
}

/// What one round did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Mean of the active devices' new models.
    pub gamma: ParamVector,
}

/// A run in progress over a borrowed federation.
pub struct Simulation<'a> {
    fed: &'a Federation,
    cfg: RunConfig,
    strategy: Box<dyn Strategy>,
    participants: usize,
    server: ServerState,
    devices: Vec<DeviceState>,
    cumulative_comm_units: f64,
    models_transmitted: f64,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Simulation<'a> {
    pub fn new(fed: &'a Federation, cfg: &RunConfig) -> Result<Self> {
        Simulation::with_init(fed, cfg, fed.init_params(cfg.seed))
    }

    pub fn with_init(fed: &'a Federation, cfg: &RunConfig, theta0: ParamVector) -> Result<Self> {
        cfg.validate(fed.num_devices())?;
        theta0.check_dim(fed.dim())?;
        let pool = match cfg.workers {
            0 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| FedError::config(format!("cannot start {n} workers: {e}")))?,
            ),
        };
        Ok(Simulation {
            fed,
            strategy: build_strategy(&cfg.algorithm)?,
            participants: participants_per_round(fed.num_devices(), cfg.participation)?,
            devices: vec![DeviceState::new(&theta0); fed.num_devices()],
            server: ServerState::new(theta0),
            cfg: cfg.clone(),
            cumulative_comm_units: 0.0,
            models_transmitted: 0.0,
            pool,
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn participants_per_round(&self) -> usize {
        self.participants
    }

    pub fn cumulative_comm_units(&self) -> f64 {
        self.cumulative_comm_units
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    /// Run one round with the sampled participants.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let round = self.server.round + 1;
        let active = sample_participants(self.fed.num_devices(), self.participants, round, self.cfg.seed);
        self.step_with(round, active)
    }

    /// Run one round with an explicit active set (sorted, distinct ids).
    pub fn step_with(&mut self, round: usize, active: Vec<usize>) -> Result<StepOutcome> {
        let (fed, strategy, server, devices, seed_value) =
            (self.fed, &self.strategy, &self.server, &self.devices, self.cfg.seed);
        let results: Vec<Result<DeviceUpdate>> = self.install(|| {
            active
                .par_iter()
                .map(|&k| {
                    let ctx = SolveContext {
                        seed: seed_value,
                        round,
                        device: k,
                    };
                    strategy
                        .device_update(&devices[k], server, fed.device(k), &ctx)
                        .map_err(|e| e.with_location(round, k))
                })
                .collect()
        });
        let updates = results.into_iter().collect::<Result<Vec<DeviceUpdate>>>()?;
        let refs: Vec<&DeviceUpdate> = updates.iter().collect();
        let next = self.strategy.server_update(&self.server, &refs, self.fed.num_devices());
        if !next.theta.is_finite() || !next.h.is_finite() {
            return Err(FedError::ServerDivergence { round });
        }
        let gamma = ParamVector::mean(updates.iter().map(|u| &u.state.theta_k)).unwrap_or_else(|| self.server.theta.clone());
        for (&k, u) in active.iter().zip(updates) {
            self.devices[k] = u.state;
        }
        self.server = next;
        let factor = self.cfg.algorithm.comm_units_per_round();
        self.cumulative_comm_units += factor * active.len() as f64 / self.participants as f64;
        self.models_transmitted += factor * active.len() as f64;
        Ok(StepOutcome {
            round,
            participants: active,
            gamma,
        })
    }

    /// Mean of every device's last local model.
    pub fn device_average(&self) -> ParamVector {
        ParamVector::mean(self.devices.iter().map(|d| &d.theta_k)).expect("nonempty federation")
    }

    /// Evaluate the current state. `outcome` is the round just run, if any.
    pub fn evaluate(&self, outcome: Option<&StepOutcome>) -> Result<RoundRecord> {
        self.install(|| {
            let server = match self.cfg.report_mode {
                ReportMode::ServerModel | ReportMode::Both => Some(evaluate_model(self.fed, &self.server.theta)?),
                ReportMode::AllDeviceAverage => None,
            };
            let device_average: Option<ModelMetrics> = match self.cfg.report_mode {
                ReportMode::AllDeviceAverage | ReportMode::Both => Some(evaluate_model(self.fed, &self.device_average())?),
                ReportMode::ServerModel => None,
            };
            let gamma_train_loss = outcome.map(|o| global_loss(self.fed, &o.gamma)).transpose()?;
            Ok(RoundRecord {
                round: self.server.round,
                participants: outcome.map_or(0, |o| o.participants.len()),
                cumulative_comm_units: self.cumulative_comm_units,
                models_transmitted: self.models_transmitted,
                gamma_train_loss,
                server,
                device_average,
            })
        })
    }

    /// Evaluate the initial state, then run every round, evaluating every
    /// `eval_every` rounds and at the last one.
    pub fn run(&mut self, sink: &mut dyn RecordSink) -> Result<()> {
        if self.server.round == 0 {
            sink.record(&self.evaluate(None)?)?;
        }
        while self.server.round < self.cfg.rounds {
            let outcome = self.step()?;
            if outcome.round % self.cfg.eval_every == 0 || outcome.round == self.cfg.rounds {
                sink.record(&self.evaluate(Some(&outcome))?)?;
            }
        }
        Ok(())
    }
}

/// Records and final states of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub server: ServerState,
    pub devices: Vec<DeviceState>,
}

pub fn run_experiment(fed: &Federation, cfg: &RunConfig) -> Result<RunResult> {
    let mut sim = Simulation::new(fed, cfg)?;
    let mut records = Vec::new();
    sim.run(&mut records)?;
    Ok(RunResult {
        records,
        server: sim.server.clone(),
        devices: sim.devices.clone(),
    })
}

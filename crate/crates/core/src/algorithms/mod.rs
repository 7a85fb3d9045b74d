//! Round-level device and server update rules.
//!
//! Each algorithm is a [`Strategy`]: a device update mapping
//! `(DeviceState, ServerState)` to a new device state, and a server update
//! folding the active devices' results into a new server state. The free
//! functions below are the individual update rules; the strategies wire them
//! together and own no mutable state.
//!
//! SCAFFOLD follows the usual option-II control-variate convention: the
//! device control `c_k` lives in [`DeviceState::h_k`] and the server control
//! `c` in [`ServerState::h`].

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::federation::LocalObjective;
use crate::localsolve::{minimize, LocalSolverConfig, Objective, Regularized, SolveContext, SolverMethod};
use crate::param::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    #[serde(rename = "feddyn")]
    FedDyn,
    #[serde(rename = "feddyn_onestep")]
    FedDynOneStep,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    Scaffold,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::FedDyn,
        AlgorithmKind::FedDynOneStep,
        AlgorithmKind::FedAvg,
        AlgorithmKind::FedProx,
        AlgorithmKind::Scaffold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::FedDyn => "feddyn",
            AlgorithmKind::FedDynOneStep => "feddyn_onestep",
            AlgorithmKind::FedAvg => "fedavg",
            AlgorithmKind::FedProx => "fedprox",
            AlgorithmKind::Scaffold => "scaffold",
        }
    }

    pub fn uses_alpha(self) -> bool {
        matches!(self, AlgorithmKind::FedDyn | AlgorithmKind::FedDynOneStep)
    }

    /// Models sent per active device per round: SCAFFOLD also ships its
    /// control variate.
    pub fn comm_units_per_round(self) -> f64 {
        if self == AlgorithmKind::Scaffold {
            2.0
        } else {
            1.0
        }
    }
}

impl std::fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AlgorithmKind {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FedError::config(format!("unknown algorithm `{s}`")))
    }
}

pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub mu_prox: f64,
    #[serde(default)]
    pub solver: LocalSolverConfig,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl AlgorithmConfig {
    pub fn new(kind: AlgorithmKind, solver: LocalSolverConfig) -> Self {
        AlgorithmConfig {
            kind,
            alpha: DEFAULT_ALPHA,
            mu_prox: 0.0,
            solver,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_mu_prox(mut self, mu: f64) -> Self {
        self.mu_prox = mu;
        self
    }

    pub fn comm_units_per_round(&self) -> f64 {
        self.kind.comm_units_per_round()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_alpha() && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(FedError::config("alpha must be positive"));
        }
        if !(self.mu_prox >= 0.0 && self.mu_prox.is_finite()) {
            return Err(FedError::config("mu_prox must be nonnegative"));
        }
        if self.kind == AlgorithmKind::Scaffold && self.solver.method == SolverMethod::ClosedFormQuadratic {
            return Err(FedError::config(
                "scaffold needs an iterative solver (sgd or full_gd) to form its control update",
            ));
        }
        self.solver.validate()
    }
}

/// Persistent per-device state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    /// Last local model.
    pub theta_k: ParamVector,
    /// FedDyn's cached local gradient.
    pub grad_cache: ParamVector,
    /// One-step state, or SCAFFOLD's control variate.
    pub h_k: ParamVector,
    /// Last round this device was active in; 0 if never.
    pub last_active_round: usize,
}

impl DeviceState {
    pub fn new(theta0: &ParamVector) -> Self {
        DeviceState {
            theta_k: theta0.clone(),
            grad_cache: ParamVector::zeros(theta0.len()),
            h_k: ParamVector::zeros(theta0.len()),
            last_active_round: 0,
        }
    }
}

/// Persistent server state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: ParamVector,
    /// FedDyn server state, or SCAFFOLD's server control variate.
    pub h: ParamVector,
    /// Completed rounds.
    pub round: usize,
}

impl ServerState {
    pub fn new(theta0: ParamVector) -> Self {
        let d = theta0.len();
        ServerState {
            theta: theta0,
            h: ParamVector::zeros(d),
            round: 0,
        }
    }
}

/// What an active device sends back.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceUpdate {
    pub state: DeviceState,
    /// SCAFFOLD control delta `c_k_new - c_k`.
    pub delta_c: Option<ParamVector>,
}

impl DeviceUpdate {
    fn plain(state: DeviceState) -> Self {
        DeviceUpdate { state, delta_c: None }
    }
}

fn non_finite(ctx: &SolveContext, what: &str) -> FedError {
    FedError::Divergence {
        round: ctx.round,
        device: ctx.device,
        detail: what.to_string(),
    }
}

/// Minimize `L_k(θ) - ⟨grad_cache, θ⟩ + (α/2)||θ - s||²` from `s`, then
/// apply the first-order recursion `grad_cache ← grad_cache - α(θ_k - s)`.
pub fn feddyn_device_update(
    state: &DeviceState,
    server_theta: &ParamVector,
    objective: &LocalObjective,
    alpha: f64,
    solver: &LocalSolverConfig,
    ctx: &SolveContext,
) -> Result<DeviceState> {
    let reg = Regularized {
        base: objective,
        linear: Some(&state.grad_cache),
        prox: Some((alpha, server_theta)),
    };
    let theta_k = minimize(&reg, server_theta, solver, ctx)?.theta;
    let mut grad_cache = state.grad_cache.clone();
    grad_cache.axpy(-alpha, &theta_k.sub(server_theta));
    Ok(DeviceState {
        theta_k,
        grad_cache,
        h_k: state.h_k.clone(),
        last_active_round: ctx.round,
    })
}

/// `h ← h - (α/m) Σ_{k∈P} (θ_k - θ)`, then `θ ← mean(θ_k) - h/α`.
///
/// An empty active set leaves the server untouched apart from the round
/// counter.
pub fn feddyn_server_update(server: &ServerState, returned: &[&ParamVector], m: usize, alpha: f64) -> ServerState {
    let Some(mean) = ParamVector::mean(returned.iter().copied()) else {
        return ServerState {
            round: server.round + 1,
            ..server.clone()
        };
    };
    let mut h = server.h.clone();
    for theta_k in returned {
        h.axpy(-alpha / m as f64, &theta_k.sub(&server.theta));
    }
    let mut theta = mean;
    theta.axpy(-1.0 / alpha, &h);
    ServerState {
        theta,
        h,
        round: server.round + 1,
    }
}

/// `θ_k = s - (∇L_k(s) - h_k)/α`, `h_k ← h_k - α(θ_k - s)`; the latter
/// equals `∇L_k(s)`.
pub fn feddyn_onestep_device_update(
    state: &DeviceState,
    server_theta: &ParamVector,
    objective: &LocalObjective,
    alpha: f64,
    ctx: &SolveContext,
) -> Result<DeviceState> {
    let g = objective.gradient(server_theta)?;
    if !g.is_finite() {
        return Err(non_finite(ctx, "non-finite gradient at the server model"));
    }
    let mut theta_k = server_theta.clone();
    theta_k.axpy(-1.0 / alpha, &g.sub(&state.h_k));
    let mut h_k = state.h_k.clone();
    h_k.axpy(-alpha, &theta_k.sub(server_theta));
    Ok(DeviceState {
        theta_k,
        grad_cache: state.grad_cache.clone(),
        h_k,
        last_active_round: ctx.round,
    })
}

pub fn fedavg_device_update(
    state: &DeviceState,
    server_theta: &ParamVector,
    objective: &LocalObjective,
    solver: &LocalSolverConfig,
    ctx: &SolveContext,
) -> Result<DeviceState> {
    fedprox_device_update(state, server_theta, objective, 0.0, solver, ctx)
}

/// Solve `L_k(θ) + (μ/2)||θ - s||²` from `s`.
pub fn fedprox_device_update(
    state: &DeviceState,
    server_theta: &ParamVector,
    objective: &LocalObjective,
    mu_prox: f64,
    solver: &LocalSolverConfig,
    ctx: &SolveContext,
) -> Result<DeviceState> {
    let reg = Regularized {
        base: objective,
        linear: None,
        prox: (mu_prox > 0.0).then_some((mu_prox, server_theta)),
    };
    let theta_k = minimize(&reg, server_theta, solver, ctx)?.theta;
    Ok(DeviceState {
        theta_k,
        last_active_round: ctx.round,
        ..state.clone()
    })
}

/// SCAFFOLD local round.
///
/// Runs the solver on `L_k(θ) - ⟨c_k - c, θ⟩`, so every step follows the
/// corrected direction `∇L_k - c_k + c`. The new control is
/// `c_k - c + (s - θ_K) / Σ lr`. Returns the new state with
/// `Δc = c_k_new - c_k`.
pub fn scaffold_device_update(
    state: &DeviceState,
    server_theta: &ParamVector,
    server_c: &ParamVector,
    objective: &LocalObjective,
    solver: &LocalSolverConfig,
    ctx: &SolveContext,
) -> Result<DeviceUpdate> {
    let correction = state.h_k.sub(server_c);
    let reg = Regularized {
        base: objective,
        linear: Some(&correction),
        prox: None,
    };
    let out = minimize(&reg, server_theta, solver, ctx)?;
    if !(out.step_sum > 0.0) {
        return Err(FedError::Contract(
            "scaffold control update needs at least one local step".into(),
        ));
    }
    let mut c_new = correction;
    c_new.axpy(1.0 / out.step_sum, &server_theta.sub(&out.theta));
    let delta_c = c_new.sub(&state.h_k);
    Ok(DeviceUpdate {
        state: DeviceState {
            theta_k: out.theta,
            grad_cache: state.grad_cache.clone(),
            h_k: c_new,
            last_active_round: ctx.round,
        },
        delta_c: Some(delta_c),
    })
}

/// Plain model averaging over the active devices.
pub fn average_server_update(server: &ServerState, returned: &[&ParamVector]) -> ServerState {
    ServerState {
        theta: ParamVector::mean(returned.iter().copied()).unwrap_or_else(|| server.theta.clone()),
        h: server.h.clone(),
        round: server.round + 1,
    }
}

/// `θ ← θ + mean_{k∈P} Δθ_k`, `c ← c + (1/m) Σ_{k∈P} Δc_k`.
pub fn scaffold_server_update(
    server: &ServerState,
    returned: &[(&ParamVector, &ParamVector)],
    m: usize,
) -> ServerState {
    if returned.is_empty() {
        return ServerState {
            round: server.round + 1,
            ..server.clone()
        };
    }
    let p = returned.len() as f64;
    let mut theta = server.theta.clone();
    let mut c = server.h.clone();
    for (theta_k, delta_c) in returned {
        theta.axpy(1.0 / p, &theta_k.sub(&server.theta));
        c.axpy(1.0 / m as f64, delta_c);
    }
    ServerState {
        theta,
        h: c,
        round: server.round + 1,
    }
}

/// One federated algorithm: device rule plus server rule.
pub trait Strategy: Send + Sync {
    fn kind(&self) -> AlgorithmKind;

    fn device_update(
        &self,
        device: &DeviceState,
        server: &ServerState,
        objective: &LocalObjective,
        ctx: &SolveContext,
    ) -> Result<DeviceUpdate>;

    /// `returned` holds the active devices' updates in ascending device order.
    fn server_update(&self, server: &ServerState, returned: &[&DeviceUpdate], m: usize) -> ServerState;
}

fn thetas<'a>(returned: &[&'a DeviceUpdate]) -> Vec<&'a ParamVector> {
    returned.iter().map(|u| &u.state.theta_k).collect()
}

pub struct FedDyn {
    pub alpha: f64,
    pub solver: LocalSolverConfig,
}

impl Strategy for FedDyn {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::FedDyn
    }

    fn device_update(
        &self,
        device: &DeviceState,
        server: &ServerState,
        objective: &LocalObjective,
        ctx: &SolveContext,
    ) -> Result<DeviceUpdate> {
        feddyn_device_update(device, &server.theta, objective, self.alpha, &self.solver, ctx).map(DeviceUpdate::plain)
    }

    fn server_update(&self, server: &ServerState, returned: &[&DeviceUpdate], m: usize) -> ServerState {
        feddyn_server_update(server, &thetas(returned), m, self.alpha)
    }
}

pub struct FedDynOneStep {
    pub alpha: f64,
}

impl Strategy for FedDynOneStep {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::FedDynOneStep
    }

    fn device_update(
        &self,
        device: &DeviceState,
        server: &ServerState,
        objective: &LocalObjective,
        ctx: &SolveContext,
    ) -> Result<DeviceUpdate> {
        feddyn_onestep_device_update(device, &server.theta, objective, self.alpha, ctx).map(DeviceUpdate::plain)
    }

    fn server_update(&self, server: &ServerState, returned: &[&DeviceUpdate], m: usize) -> ServerState {
        feddyn_server_update(server, &thetas(returned), m, self.alpha)
    }
}

pub struct FedAvg {
    pub solver: LocalSolverConfig,
}

impl Strategy for FedAvg {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::FedAvg
    }

    fn device_update(
        &self,
        device: &DeviceState,
        server: &ServerState,
        objective: &LocalObjective,
        ctx: &SolveContext,
    ) -> Result<DeviceUpdate> {
        fedavg_device_update(device, &server.theta, objective, &self.solver, ctx).map(DeviceUpdate::plain)
    }

    fn server_update(&self, server: &ServerState, returned: &[&DeviceUpdate], _m: usize) -> ServerState {
        average_server_update(server, &thetas(returned))
    }
}

pub struct FedProx {
    pub mu_prox: f64,
    pub solver: LocalSolverConfig,
}

impl Strategy for FedProx {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::FedProx
    }

    fn device_update(
        &self,
        device: &DeviceState,
        server: &ServerState,
        objective: &LocalObjective,
        ctx: &SolveContext,
    ) -> Result<DeviceUpdate> {
        fedprox_device_update(device, &server.theta, objective, self.mu_prox, &self.solver, ctx)
            .map(DeviceUpdate::plain)
    }

    fn server_update(&self, server: &ServerState, returned: &[&DeviceUpdate], _m: usize) -> ServerState {
        average_server_update(server, &thetas(returned))
    }
}

pub struct Scaffold {
    pub solver: LocalSolverConfig,
}

impl Strategy for Scaffold {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Scaffold
    }

    fn device_update(
        &self,
        device: &DeviceState,
        server: &ServerState,
        objective: &LocalObjective,
        ctx: &SolveContext,
    ) -> Result<DeviceUpdate> {
        scaffold_device_update(device, &server.theta, &server.h, objective, &self.solver, ctx)
    }

    fn server_update(&self, server: &ServerState, returned: &[&DeviceUpdate], m: usize) -> ServerState {
        let pairs: Vec<(&ParamVector, &ParamVector)> = returned
            .iter()
            .map(|u| {
                (
                    &u.state.theta_k,
                    u.delta_c.as_ref().expect("scaffold device updates carry a control delta"),
                )
            })
            .collect();
        scaffold_server_update(server, &pairs, m)
    }
}

/// Build the strategy a config describes.
pub fn build_strategy(cfg: &AlgorithmConfig) -> Result<Box<dyn Strategy>> {
    cfg.validate()?;
    let solver = cfg.solver.clone();
    Ok(match cfg.kind {
        AlgorithmKind::FedDyn => Box::new(FedDyn {
            alpha: cfg.alpha,
            solver,
        }),
        AlgorithmKind::FedDynOneStep => Box::new(FedDynOneStep { alpha: cfg.alpha }),
        AlgorithmKind::FedAvg => Box::new(FedAvg { solver }),
        AlgorithmKind::FedProx => Box::new(FedProx {
            mu_prox: cfg.mu_prox,
            solver,
        }),
        AlgorithmKind::Scaffold => Box::new(Scaffold { solver }),
    })
}

/// Gradient norm of the FedDyn device objective at `theta`; zero when the
/// local solve was exact.
pub fn feddyn_residual(
    objective: &LocalObjective,
    grad_cache: &ParamVector,
    server_theta: &ParamVector,
    alpha: f64,
    theta: &ParamVector,
) -> Result<f64> {
    let reg = Regularized {
        base: objective,
        linear: Some(grad_cache),
        prox: Some((alpha, server_theta)),
    };
    Ok(reg.gradient(theta)?.norm())
}

#[cfg(test)]
mod tests;

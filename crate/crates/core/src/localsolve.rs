//! Inner optimizers run by devices: mini-batch SGD, full-gradient descent and
//! a closed-form solve for quadratic objectives.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::federation::{Federation, LocalObjective};
use crate::param::ParamVector;
use crate::seed::{self, domain};

/// Clip norm used when clipping is switched on without an explicit value.
pub const DEFAULT_CLIP_NORM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Sgd,
    FullGd,
    ClosedFormQuadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalSolverConfig {
    pub method: SolverMethod,
    /// SGD step size (before per-round decay).
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Fixed number of SGD steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    /// Multiplicative SGD step decay per communication round.
    pub lr_decay_per_round: f64,
    pub grad_clip_norm: Option<f64>,
    /// Gradient-norm stopping tolerance for full-gradient descent.
    pub tol: f64,
    pub max_iters: usize,
    /// Full-gradient step size; `None` uses `1 / L` from the objective's
    /// smoothness bound (falling back to `lr` when no bound is known).
    pub gd_step: Option<f64>,
}

impl Default for LocalSolverConfig {
    fn default() -> Self {
        LocalSolverConfig {
            method: SolverMethod::Sgd,
            lr: 0.1,
            epochs: 1,
            batch: 50,
            steps: None,
            lr_decay_per_round: 1.0,
            grad_clip_norm: None,
            tol: 1e-9,
            max_iters: 10_000,
            gd_step: None,
        }
    }
}

impl LocalSolverConfig {
    pub fn sgd(lr: f64, epochs: usize, batch: usize) -> Self {
        LocalSolverConfig {
            lr,
            epochs,
            batch,
            ..Default::default()
        }
    }

    pub fn full_gd(tol: f64, max_iters: usize) -> Self {
        LocalSolverConfig {
            method: SolverMethod::FullGd,
            tol,
            max_iters,
            ..Default::default()
        }
    }

    pub fn closed_form() -> Self {
        LocalSolverConfig {
            method: SolverMethod::ClosedFormQuadratic,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(FedError::config("solver lr must be positive"));
        }
        if self.batch < 1 || self.epochs < 1 {
            return Err(FedError::config("solver batch and epochs must be at least 1"));
        }
        if self.steps == Some(0) {
            return Err(FedError::config("solver steps must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(FedError::config("solver tol must be positive"));
        }
        if !(self.lr_decay_per_round > 0.0 && self.lr_decay_per_round <= 1.0) {
            return Err(FedError::config("lr_decay_per_round must lie in (0, 1]"));
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return Err(FedError::config("grad_clip_norm must be positive"));
        }
        if matches!(self.gd_step, Some(s) if !(s > 0.0)) {
            return Err(FedError::config("gd_step must be positive"));
        }
        Ok(())
    }

    /// SGD steps one call performs on `n` samples (`n = 0`: data-free, one
    /// full-gradient step per epoch).
    pub fn resolved_steps(&self, n: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n.max(1).div_ceil(self.batch.min(n.max(1))))
    }
}

/// Where a solve happens: used for RNG streams, step decay and error context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolveContext {
    pub seed: u64,
    /// 1-based communication round.
    pub round: usize,
    pub device: usize,
}

/// Result of a local solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub theta: ParamVector,
    pub steps: usize,
    /// Sum of the step sizes applied (`K * lr` for constant-step SGD).
    pub step_sum: f64,
}

/// A differentiable function the local solvers can minimize.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, theta: &ParamVector) -> Result<f64>;
    fn gradient(&self, theta: &ParamVector) -> Result<ParamVector>;
    /// Samples for mini-batching; zero means data-free.
    fn num_samples(&self) -> usize;
    fn batch_gradient(&self, theta: &ParamVector, rows: &[usize]) -> Result<ParamVector>;
    fn smoothness_bound(&self) -> Option<f64>;
    /// `(H, b)` with `∇f(θ) = Hθ - b`, when the objective is quadratic.
    fn quadratic_system(&self) -> Option<(DMatrix<f64>, DVector<f64>)>;
}

impl Objective for LocalObjective {
    fn dim(&self) -> usize {
        LocalObjective::dim(self)
    }
    fn value(&self, theta: &ParamVector) -> Result<f64> {
        LocalObjective::value(self, theta)
    }
    fn gradient(&self, theta: &ParamVector) -> Result<ParamVector> {
        LocalObjective::gradient(self, theta)
    }
    fn num_samples(&self) -> usize {
        LocalObjective::num_samples(self)
    }
    fn batch_gradient(&self, theta: &ParamVector, rows: &[usize]) -> Result<ParamVector> {
        LocalObjective::batch_gradient(self, theta, rows)
    }
    fn smoothness_bound(&self) -> Option<f64> {
        LocalObjective::smoothness_bound(self)
    }
    fn quadratic_system(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let q = self.model.as_quadratic()?;
        Some((q.hessian(), DVector::from_column_slice(q.linear_term().as_slice())))
    }
}

/// The global objective `ℓ(θ) = (1/m) Σ_k L_k(θ)`.
pub struct MeanObjective<'a>(pub &'a Federation);

impl Objective for MeanObjective<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn value(&self, theta: &ParamVector) -> Result<f64> {
        crate::metrics::global_loss(self.0, theta)
    }
    fn gradient(&self, theta: &ParamVector) -> Result<ParamVector> {
        crate::metrics::mean_gradient(self.0, theta)
    }
    fn num_samples(&self) -> usize {
        0
    }
    fn batch_gradient(&self, theta: &ParamVector, _rows: &[usize]) -> Result<ParamVector> {
        self.gradient(theta)
    }
    fn smoothness_bound(&self) -> Option<f64> {
        self.0
            .devices()
            .iter()
            .map(|o| o.smoothness_bound())
            .try_fold(0.0f64, |acc, l| l.map(|l| acc.max(l)))
    }
    fn quadratic_system(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let m = self.0.num_devices() as f64;
        let mut acc: Option<(DMatrix<f64>, DVector<f64>)> = None;
        for obj in self.0.devices() {
            let (h, b) = Objective::quadratic_system(obj)?;
            acc = Some(match acc {
                Some((ha, ba)) => (ha + h, ba + b),
                None => (h, b),
            });
        }
        acc.map(|(h, b)| (h / m, b / m))
    }
}

/// `L_k(θ) - ⟨linear, θ⟩ + (prox_weight / 2) ||θ - prox_center||²`.
///
/// Covers every device objective in the simulator: FedDyn (linear term and
/// proximal term), FedProx (proximal only), SCAFFOLD (linear correction only)
/// and FedAvg (neither).
pub struct Regularized<'a> {
    pub base: &'a LocalObjective,
    pub linear: Option<&'a ParamVector>,
    pub prox: Option<(f64, &'a ParamVector)>,
}

impl<'a> Regularized<'a> {
    pub fn plain(base: &'a LocalObjective) -> Self {
        Regularized {
            base,
            linear: None,
            prox: None,
        }
    }

    fn adjust(&self, theta: &ParamVector, mut g: ParamVector) -> ParamVector {
        if let Some(lin) = self.linear {
            g.axpy(-1.0, lin);
        }
        if let Some((w, center)) = self.prox {
            g.axpy(w, theta);
            g.axpy(-w, center);
        }
        g
    }
}

impl Objective for Regularized<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value(&self, theta: &ParamVector) -> Result<f64> {
        let mut v = self.base.value(theta)?;
        if let Some(lin) = self.linear {
            v -= lin.dot(theta);
        }
        if let Some((w, center)) = self.prox {
            v += 0.5 * w * theta.sub(center).norm_sq();
        }
        Ok(v)
    }

    fn gradient(&self, theta: &ParamVector) -> Result<ParamVector> {
        Ok(self.adjust(theta, self.base.gradient(theta)?))
    }

    fn num_samples(&self) -> usize {
        self.base.num_samples()
    }

    fn batch_gradient(&self, theta: &ParamVector, rows: &[usize]) -> Result<ParamVector> {
        Ok(self.adjust(theta, self.base.batch_gradient(theta, rows)?))
    }

    fn smoothness_bound(&self) -> Option<f64> {
        Some(self.base.smoothness_bound()? + self.prox.map_or(0.0, |(w, _)| w))
    }

    fn quadratic_system(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let (mut h, mut b) = Objective::quadratic_system(self.base)?;
        if let Some(lin) = self.linear {
            b += DVector::from_column_slice(lin.as_slice());
        }
        if let Some((w, center)) = self.prox {
            for i in 0..h.nrows() {
                h[(i, i)] += w;
            }
            b += DVector::from_column_slice(center.as_slice()) * w;
        }
        Some((h, b))
    }
}

fn diverged(ctx: &SolveContext, what: &str) -> FedError {
    FedError::Divergence {
        round: ctx.round,
        device: ctx.device,
        detail: what.to_string(),
    }
}

/// Rescale `g` in place so that `||g|| <= clip`.
pub fn clip_gradient(g: &mut ParamVector, clip: f64) -> bool {
    let norm = g.norm();
    if norm > clip {
        g.scale(clip / norm);
        true
    } else {
        false
    }
}

/// Run the configured inner solver from `init`.
pub fn minimize<O: Objective + ?Sized>(
    objective: &O,
    init: &ParamVector,
    cfg: &LocalSolverConfig,
    ctx: &SolveContext,
) -> Result<SolveOutcome> {
    init.check_dim(objective.dim())?;
    if !init.is_finite() {
        return Err(diverged(ctx, "non-finite initial iterate"));
    }
    match cfg.method {
        SolverMethod::Sgd => sgd(objective, init, cfg, ctx),
        SolverMethod::FullGd => full_gd(objective, init, cfg, ctx),
        SolverMethod::ClosedFormQuadratic => closed_form(objective, ctx),
    }
}

fn sgd<O: Objective + ?Sized>(
    objective: &O,
    init: &ParamVector,
    cfg: &LocalSolverConfig,
    ctx: &SolveContext,
) -> Result<SolveOutcome> {
    let n = objective.num_samples();
    let total_steps = cfg.resolved_steps(n);
    let lr = cfg.lr * cfg.lr_decay_per_round.powi(ctx.round.saturating_sub(1) as i32);
    let mut rng = seed::stream(ctx.seed, &[domain::SOLVER, ctx.round as u64, ctx.device as u64]);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch.min(n.max(1));

    let mut theta = init.clone();
    let mut cursor = n; // forces a shuffle before the first batch
    for _ in 0..total_steps {
        let mut g = if n == 0 {
            objective.gradient(&theta)?
        } else {
            if cursor >= n {
                // Full-batch passes sum in row order regardless of seed.
                if batch < n {
                    order.shuffle(&mut rng);
                }
                cursor = 0;
            }
            let end = (cursor + batch).min(n);
            let g = objective.batch_gradient(&theta, &order[cursor..end])?;
            cursor = end;
            g
        };
        if let Some(clip) = cfg.grad_clip_norm {
            clip_gradient(&mut g, clip);
        }
        theta.axpy(-lr, &g);
        if !theta.is_finite() {
            return Err(diverged(ctx, "non-finite SGD iterate"));
        }
    }
    Ok(SolveOutcome {
        theta,
        steps: total_steps,
        step_sum: lr * total_steps as f64,
    })
}

fn full_gd<O: Objective + ?Sized>(
    objective: &O,
    init: &ParamVector,
    cfg: &LocalSolverConfig,
    ctx: &SolveContext,
) -> Result<SolveOutcome> {
    let step = cfg
        .gd_step
        .or_else(|| objective.smoothness_bound().map(|l| 1.0 / l))
        .unwrap_or(cfg.lr);
    let mut theta = init.clone();
    let mut steps = 0;
    while steps < cfg.max_iters {
        let g = objective.gradient(&theta)?;
        if g.norm() <= cfg.tol {
            break;
        }
        theta.axpy(-step, &g);
        steps += 1;
        if !theta.is_finite() {
            return Err(diverged(ctx, "non-finite gradient-descent iterate"));
        }
    }
    Ok(SolveOutcome {
        theta,
        steps,
        step_sum: step * steps as f64,
    })
}

fn closed_form<O: Objective + ?Sized>(objective: &O, ctx: &SolveContext) -> Result<SolveOutcome> {
    let (h, b) = objective.quadratic_system().ok_or_else(|| {
        FedError::Contract("closed-form solve requested for a non-quadratic objective".into())
    })?;
    let x = h
        .clone()
        .cholesky()
        .map(|c| c.solve(&b))
        .or_else(|| h.lu().solve(&b))
        .ok_or_else(|| diverged(ctx, "singular local system"))?;
    let theta = ParamVector::from_vec(x.as_slice().to_vec());
    if !theta.is_finite() {
        return Err(diverged(ctx, "non-finite closed-form solution"));
    }
    Ok(SolveOutcome {
        theta,
        steps: 1,
        step_sum: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{DataShard, LogisticModel, LossModel, QuadraticLoss};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CTX: SolveContext = SolveContext {
        seed: 1,
        round: 1,
        device: 0,
    };

    fn scalar_quadratic(center: f64) -> LocalObjective {
        LocalObjective::quadratic(QuadraticLoss::isotropic(ParamVector::from_vec(vec![center]), 1.0).unwrap())
    }

    fn random_quadratic(rng: &mut ChaCha8Rng, d: usize) -> LocalObjective {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let s = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
        let c = ParamVector::from_vec((0..d).map(|_| rng.random_range(-2.0..2.0)).collect());
        LocalObjective::quadratic(QuadraticLoss::new(c, s, 0.0).unwrap())
    }

    fn logistic_objective(seed: u64) -> LocalObjective {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let features = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
        LocalObjective::new(
            LossModel::Logistic(LogisticModel::new(3, 3, 1e-2)),
            DataShard::new(features, 3, labels).unwrap(),
        )
    }

    #[test]
    fn full_gd_reaches_scalar_minimizer() {
        let obj = scalar_quadratic(3.0);
        let mut cfg = LocalSolverConfig::full_gd(1e-9, 10_000);
        cfg.gd_step = Some(0.5);
        let out = minimize(&obj, &ParamVector::zeros(1), &cfg, &CTX).unwrap();
        assert!((out.theta[0] - 3.0).abs() <= 1e-9);
    }

    #[test]
    fn full_batch_sgd_epoch_is_one_gradient_step() {
        let obj = logistic_objective(2);
        let cfg = LocalSolverConfig::sgd(0.3, 1, 40);
        let init = ParamVector::from_vec((0..12).map(|i| 0.01 * i as f64).collect());
        let out = minimize(&obj, &init, &cfg, &CTX).unwrap();
        let mut expected = init.clone();
        expected.axpy(-0.3, &obj.gradient(&init).unwrap());
        assert_eq!(out.steps, 1);
        assert!(out.theta.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn closed_form_agrees_with_tight_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let obj = random_quadratic(&mut rng, 10);
        let lin = ParamVector::from_vec((0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
        let center = ParamVector::from_vec((0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
        let reg = Regularized {
            base: &obj,
            linear: Some(&lin),
            prox: Some((0.7, &center)),
        };
        let exact = minimize(&reg, &center, &LocalSolverConfig::closed_form(), &CTX).unwrap();
        let iterative = minimize(&reg, &center, &LocalSolverConfig::full_gd(1e-12, 1_000_000), &CTX).unwrap();
        assert!(exact.theta.max_abs_diff(&iterative.theta) < 1e-8);
        assert!(reg.gradient(&exact.theta).unwrap().norm() < 1e-10);
    }

    #[test]
    fn closed_form_rejects_non_quadratic() {
        let obj = logistic_objective(1);
        let err = minimize(&obj, &ParamVector::zeros(12), &LocalSolverConfig::closed_form(), &CTX);
        assert!(matches!(err, Err(FedError::Contract(_))));
    }

    #[test]
    fn divergence_carries_location() {
        let obj = scalar_quadratic(1.0);
        let mut cfg = LocalSolverConfig::sgd(1e155, 50, 1);
        cfg.lr_decay_per_round = 1.0;
        let ctx = SolveContext {
            seed: 0,
            round: 7,
            device: 3,
        };
        match minimize(&obj, &ParamVector::from_vec(vec![1e155]), &cfg, &ctx) {
            Err(FedError::Divergence { round: 7, device: 3, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn decay_and_steps_resolution() {
        let obj = scalar_quadratic(1.0);
        let mut cfg = LocalSolverConfig::sgd(0.5, 1, 1);
        cfg.lr_decay_per_round = 0.5;
        let ctx = SolveContext { round: 3, ..CTX };
        let out = minimize(&obj, &ParamVector::zeros(1), &cfg, &ctx).unwrap();
        // lr = 0.5 * 0.5^2
        assert!((out.theta[0] - 0.125).abs() < 1e-15);
        assert_eq!(out.step_sum, 0.125);

        assert_eq!(LocalSolverConfig::sgd(0.1, 10, 10).resolved_steps(200), 200);
        assert_eq!(LocalSolverConfig::sgd(0.1, 2, 50).resolved_steps(120), 6);
        let with_k = LocalSolverConfig {
            steps: Some(17),
            ..LocalSolverConfig::sgd(0.1, 10, 10)
        };
        assert_eq!(with_k.resolved_steps(200), 17);
    }

    #[test]
    fn config_validation() {
        assert!(LocalSolverConfig::default().validate().is_ok());
        for bad in [
            LocalSolverConfig { lr: 0.0, ..Default::default() },
            LocalSolverConfig { batch: 0, ..Default::default() },
            LocalSolverConfig { tol: 0.0, ..Default::default() },
            LocalSolverConfig { lr_decay_per_round: 1.5, ..Default::default() },
            LocalSolverConfig { grad_clip_norm: Some(-1.0), ..Default::default() },
            LocalSolverConfig { steps: Some(0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn solves_are_deterministic(seed in any::<u64>(), round in 1usize..50, device in 0usize..20) {
            let obj = logistic_objective(seed % 17);
            let cfg = LocalSolverConfig { grad_clip_norm: Some(DEFAULT_CLIP_NORM), ..LocalSolverConfig::sgd(0.5, 3, 7) };
            let ctx = SolveContext { seed, round, device };
            let a = minimize(&obj, &ParamVector::zeros(12), &cfg, &ctx).unwrap();
            let b = minimize(&obj, &ParamVector::zeros(12), &cfg, &ctx).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn gradient_descent_is_monotone_on_quadratics(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obj = random_quadratic(&mut rng, 6);
            let l = obj.smoothness_bound().unwrap();
            let mut theta = ParamVector::from_vec((0..6).map(|_| rng.random_range(-5.0..5.0)).collect());
            let mut prev = obj.value(&theta).unwrap();
            for _ in 0..50 {
                let cfg = LocalSolverConfig { gd_step: Some(1.0 / l), ..LocalSolverConfig::full_gd(1e-14, 1) };
                theta = minimize(&obj, &theta, &cfg, &CTX).unwrap().theta;
                let v = obj.value(&theta).unwrap();
                prop_assert!(v <= prev + 1e-12 * prev.abs().max(1.0));
                prev = v;
            }
        }

        #[test]
        fn clipping_bounds_the_norm(values in proptest::collection::vec(-100.0f64..100.0, 1..20), clip in 0.01f64..50.0) {
            let mut g = ParamVector::from_vec(values);
            if clip_gradient(&mut g, clip) {
                prop_assert!(g.norm() <= clip + 1e-12);
            }
        }
    }
}

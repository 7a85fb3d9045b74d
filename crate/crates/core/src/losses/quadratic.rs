use nalgebra::{DMatrix, DVector};

use crate::error::{FedError, Result};
use crate::param::ParamVector;

/// `L(θ) = ½ (θ - c)ᵀ S (θ - c) + (wd/2) ||θ||²` with `S` symmetric PSD.
///
/// Data-free: the shard passed alongside it is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    pub center: ParamVector,
    pub scale: DMatrix<f64>,
    pub weight_decay: f64,
    eig_min: f64,
    eig_max: f64,
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 200_000;

impl QuadraticLoss {
    pub fn new(center: ParamVector, scale: DMatrix<f64>, weight_decay: f64) -> Result<Self> {
        let d = center.len();
        if d == 0 {
            return Err(FedError::config("quadratic dimension must be positive"));
        }
        if scale.nrows() != d || scale.ncols() != d {
            return Err(FedError::DimensionMismatch {
                expected: d,
                got: scale.nrows(),
            });
        }
        if !(weight_decay >= 0.0) {
            return Err(FedError::config("weight_decay must be nonnegative"));
        }
        let asym = (&scale - scale.transpose()).amax();
        if asym > 1e-12 * scale.amax().max(1.0) {
            return Err(FedError::config("quadratic scale must be symmetric"));
        }
        let (eig_min, eig_max) = symmetric_eigen_bounds(&scale);
        if eig_min < -1e-9 * eig_max.abs().max(1.0) {
            return Err(FedError::config(format!(
                "quadratic scale is not positive semidefinite (min eigenvalue {eig_min:e})"
            )));
        }
        Ok(QuadraticLoss {
            center,
            scale,
            weight_decay,
            eig_min,
            eig_max,
        })
    }

    /// `S = s * I`.
    pub fn isotropic(center: ParamVector, s: f64) -> Result<Self> {
        let d = center.len();
        Self::new(center, DMatrix::identity(d, d) * s, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Strong-convexity constant `λ_min(S) + wd`.
    pub fn strong_convexity(&self) -> f64 {
        self.eig_min.max(0.0) + self.weight_decay
    }

    /// Smoothness constant `λ_max(S) + wd`.
    pub fn smoothness(&self) -> f64 {
        self.eig_max + self.weight_decay
    }

    /// Hessian `S + wd I`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let d = self.dim();
        &self.scale + DMatrix::identity(d, d) * self.weight_decay
    }

    /// `b` such that `∇L(θ) = Hθ - b`, i.e. `S c`.
    pub fn linear_term(&self) -> ParamVector {
        let c = DVector::from_column_slice(self.center.as_slice());
        ParamVector::from_vec((&self.scale * c).as_slice().to_vec())
    }

    pub fn value(&self, params: &ParamVector) -> f64 {
        let diff = DVector::from_column_slice(params.sub(&self.center).as_slice());
        0.5 * diff.dot(&(&self.scale * &diff)) + 0.5 * self.weight_decay * params.norm_sq()
    }

    pub fn gradient(&self, params: &ParamVector) -> ParamVector {
        let diff = DVector::from_column_slice(params.sub(&self.center).as_slice());
        let mut g = ParamVector::from_vec((&self.scale * diff).as_slice().to_vec());
        g.axpy(self.weight_decay, params);
        g
    }
}

/// `(λ_min, λ_max)` of a symmetric matrix by power iteration.
///
/// With `r = ||S||_F ≥ ρ(S)`, both `S + rI` and `rI - S` are PSD; their
/// dominant eigenvalues are `λ_max + r` and `r - λ_min`.
pub fn symmetric_eigen_bounds(s: &DMatrix<f64>) -> (f64, f64) {
    let d = s.nrows();
    let r = s.norm();
    if r == 0.0 {
        return (0.0, 0.0);
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let lambda_max = power_iteration(&(s + &eye * r)) - r;
    let lambda_min = r - power_iteration(&(&eye * r - s));
    (lambda_min, lambda_max)
}

fn power_iteration(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows();
    // Irregular start vector so it is not orthogonal to any eigenvector of
    // the structured matrices used in tests.
    let mut v = DVector::from_fn(d, |i, _| 1.0 + 0.37 * (i as f64 + 1.0).sqrt().fract() + 0.01 * i as f64);
    v /= v.norm();
    let scale = a.norm().max(f64::MIN_POSITIVE);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = a * &v;
        lambda = v.dot(&w);
        // Stop on the eigen-residual ||Av - λv||, not on changes in λ.
        if (&w - &v * lambda).norm() <= POWER_TOL * scale {
            break;
        }
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    lambda
}

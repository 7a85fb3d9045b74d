//! Deterministic, single-process federated optimization simulator.
//!
//! Implements FedDyn (dynamic regularization), its one-gradient-step
//! variant, FedAvg, FedProx and SCAFFOLD behind one strategy interface,
//! together with synthetic and partitioned data generators, inner solvers,
//! communication accounting and convergence probes.

pub mod error;
pub mod param;
pub mod seed;
pub mod losses;
pub mod datagen;
pub mod federation;
pub mod localsolve;
pub mod algorithms;
pub mod metrics;
pub mod simulator;

pub use error::{FedError, Result};
pub use param::ParamVector;

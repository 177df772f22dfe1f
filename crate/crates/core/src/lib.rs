//! Quantile-regression inference laboratory.
//!
//! This crate provides an exact vertex solver for the check-loss objective,
//! closed-form and enumerated finite-sample densities of the estimator,
//! asymptotic covariance machinery for the quantile process, difference-quotient
//! sparsity estimation with sandwich confidence intervals, dyadic coupling
//! diagnostics against Gaussian companion processes, and a deterministic
//! Monte Carlo study engine.
//!
//! Layout:
//! - [`design`]: datasets, simulation specs (location–scale family), diagnostics
//! - [`solver`]: exact check-loss minimization, bases, process fits
//! - [`asymptotics`]: H, G(τ), sandwich Σ(τ), grid covariance, conditional increments
//! - [`density`]: exact finite-sample estimator density, normal comparison, lattice-ratio lab
//! - [`inference`]: bandwidths, sparsity difference quotients, sandwich standard errors, CIs
//! - [`coupling`]: dyadic grids, process draws, Gaussian companions, coupling diagnostics
//! - [`studies`]: replication engine, rate fitting, persisted reports
//! - [`report`]: serializable record types with versioning and NaN rejection
//! - [`rng`]: counter-based substream derivation for deterministic parallelism

// Validation guards are written `!(x > 0.0)` on purpose: unlike the suggested
// `x <= 0.0`, the negated form also rejects NaN, which is exactly what input
// checking must do.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod coupling;
pub mod density;
pub mod design;
pub mod error;
pub mod inference;
pub mod report;
pub mod rng;
pub mod solver;
pub mod studies;
pub mod util;

pub use error::{QrError, Result};

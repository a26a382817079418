//! Classifier guidance on Gaussian mixtures with shared covariance: closed-form
//! score functionals, guided ODE/SDE samplers and their discretisations, entropy
//! estimators, and the analytic confidence bounds and phase thresholds.

pub mod dynamics;
pub mod entropy;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod theory;

pub use error::{Error, Result};
pub use gmm::{MixtureModel, Sampler};

//! Config-driven pipelines for coarse-model Bayesian inversion: synthetic
//! data, naive and corrected MCMC, error statistics, predictive checks,
//! closed-form oracle output and reporting.

pub mod config;
pub mod io;
pub mod manifest;
pub mod stages;

pub use config::{Overrides, PipelineConfig, Profile};
pub use stages::{Pipeline, StageOutcome, Which};

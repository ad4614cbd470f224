//! Hierarchical Bayesian inversion with coarse-model error correction.
//!
//! An expensive "fine" forward model is replaced during MCMC by a cheap
//! "coarse" model. The bias and extra uncertainty introduced by the swap are
//! estimated empirically from an ensemble of paired fine/coarse runs and
//! folded into the likelihood as a Gaussian total-error model. The crate
//! provides:
//!
//! - dense Gaussian machinery ([`probability`]),
//! - forward models: a polynomial curve-fit pair, a 2-D steady-state
//!   heat-transport slice at fine/coarse grids, and a subprocess adapter for
//!   external simulators ([`forward`]),
//! - approximation-error ensembles and total-error construction ([`bae`]),
//! - an affine-invariant ensemble MCMC sampler with chain diagnostics
//!   ([`sampler`]),
//! - posterior assembly, predictive checks, and feasibility summaries
//!   ([`posterior`]),
//! - closed-form linear-Gaussian posteriors used as ground truth ([`oracle`]).

pub mod bae;
pub mod forward;
pub mod linalg;
pub mod oracle;
pub mod posterior;
pub mod probability;
pub mod rng;
pub mod sampler;

//! Forward-model abstraction and the concrete models shipped with the crate.
//!
//! A forward model maps a parameter vector (log10 permeabilities or
//! polynomial coefficients) to an observation vector with a fixed ordering.
//! Evaluation is deterministic and pure; any non-convergence is surfaced as a
//! recoverable [`ModelRunFailure`], never a panic, so that failure policies
//! upstream can react.

use nalgebra::DVector;
use thiserror::Error;

pub mod external;
pub mod polynomial;
pub mod slice;

pub use external::{ExternalModel, ExternalModelSpec};
pub use polynomial::{coarse_projection, poly_design_matrix, LinearModel};
pub use slice::{RockMap, RockRegion, SliceConfig, SliceModel, Well};

/// Inference target: a real vector of model parameters.
pub type ParameterVector = DVector<f64>;

/// Model output: a real vector of observed quantities with fixed ordering.
pub type ObservationVector = DVector<f64>;

/// A model run that did not produce an observation vector.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelRunFailure {
    #[error("parameter vector has length {got}, model expects {expected}")]
    WrongInputDim { expected: usize, got: usize },
    #[error("parameter vector contains a non-finite entry at index {index}")]
    NonFiniteParameter { index: usize },
    #[error("linear solve did not converge: {detail}")]
    SolveDiverged { detail: String },
    #[error("simulator-error: {0}")]
    SimulatorError(String),
    #[error("simulator timed out after {seconds} s")]
    Timeout { seconds: u64 },
    #[error("simulator protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("simulator process died: {0}")]
    ProcessDied(String),
}

/// Deterministic parameter-to-observation map.
pub trait ForwardModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, k: &ParameterVector) -> Result<ObservationVector, ModelRunFailure>;
}

pub(crate) fn check_input(
    model: &dyn ForwardModel,
    k: &ParameterVector,
) -> Result<(), ModelRunFailure> {
    if k.len() != model.input_dim() {
        return Err(ModelRunFailure::WrongInputDim {
            expected: model.input_dim(),
            got: k.len(),
        });
    }
    if let Some(index) = k.iter().position(|v| !v.is_finite()) {
        return Err(ModelRunFailure::NonFiniteParameter { index });
    }
    Ok(())
}

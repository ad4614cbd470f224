//! Approximation-error machinery: paired fine/coarse ensembles, their
//! statistics, total-error construction, failure policy and normality
//! diagnostics.
//!
//! The central object is an ensemble of discrepancies `f(k) - g(k)` over
//! parameter draws. Its mean and covariance (with the `1/(q-1)` divisor) are
//! added to the measurement-noise model to form the total-error Gaussian used
//! by the corrected likelihood. Construction is embarrassingly parallel over
//! draws; results are reduced in draw-index order so the outcome is
//! bit-identical regardless of the worker count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::{ForwardModel, ModelRunFailure};
use crate::probability::{
    estimate_moments, standard_normal_quantile, GaussianModel, JitterPolicy, ParameterSource,
    ProbabilityError, SampleEnsemble,
};

#[derive(Debug, Error)]
pub enum BaeError {
    #[error("fine model output dim {fine} does not match coarse output dim {coarse}")]
    OutputDimMismatch { fine: usize, coarse: usize },
    #[error(
        "attempt budget exhausted: {attempts} attempts produced only {succeeded}/{requested} \
         pairs ({failed} failures)"
    )]
    BudgetExhausted {
        attempts: u64,
        succeeded: usize,
        requested: usize,
        failed: usize,
    },
    #[error("only {succeeded} pairs succeeded under the drop policy; need at least 2")]
    TooFewSurvivors { succeeded: usize },
    #[error("noise model dim {noise} does not match error statistics dim {errors}")]
    NoiseDimMismatch { noise: usize, errors: usize },
    #[error("normality diagnostics need at least 8 samples, got {got}")]
    TooFewForDiagnostics { got: usize },
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
}

/// What to do when a fine or coarse run fails during ensemble construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    /// Discard the failed draw and replace it with a fresh one, up to a total
    /// attempt budget of `3 q`.
    #[default]
    Replace,
    /// Failures shrink the ensemble.
    Drop,
}

/// Which distribution the parameter draws came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorSource {
    PriorBased,
    PosteriorInformed,
}

/// One failed model run during ensemble construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub attempt: u64,
    /// "fine" or "coarse"
    pub stage: &'static str,
    pub reason: String,
}

/// Output of [`build_error_ensemble`]: the discrepancy vectors plus the
/// bookkeeping needed for metadata.
#[derive(Debug, Clone)]
pub struct ErrorEnsemble {
    pub ensemble: SampleEnsemble,
    pub q_requested: usize,
    pub q_failed: usize,
    pub attempts: u64,
    pub failures: Vec<FailureRecord>,
}

impl ErrorEnsemble {
    pub fn q_succeeded(&self) -> usize {
        self.ensemble.count()
    }
}

/// Evaluate `f(k) - g(k)` over `q` draws from `source`.
///
/// Under [`FailurePolicy::Replace`] failed draws are discarded, logged and
/// replaced by fresh draws until the ensemble is full or `3 q` attempts have
/// been spent; under [`FailurePolicy::Drop`] failures shrink the ensemble.
/// Pairs are evaluated in parallel but stored in attempt order.
pub fn build_error_ensemble(
    source: &dyn ParameterSource,
    fine: &dyn ForwardModel,
    coarse: &dyn ForwardModel,
    q: usize,
    policy: FailurePolicy,
) -> Result<ErrorEnsemble, BaeError> {
    if fine.output_dim() != coarse.output_dim() {
        return Err(BaeError::OutputDimMismatch {
            fine: fine.output_dim(),
            coarse: coarse.output_dim(),
        });
    }
    let budget = match policy {
        FailurePolicy::Replace => 3 * q as u64,
        FailurePolicy::Drop => q as u64,
    };
    let mut slots: Vec<Option<DVector<f64>>> = vec![None; q];
    let mut failures: Vec<FailureRecord> = Vec::new();
    let mut next_attempt: u64 = 0;
    let mut pending: Vec<(usize, u64)> = (0..q)
        .map(|slot| {
            let a = next_attempt;
            next_attempt += 1;
            (slot, a)
        })
        .collect();

    while !pending.is_empty() {
        let batch: Vec<(usize, Result<DVector<f64>, FailureRecord>)> = pending
            .par_iter()
            .map(|&(slot, attempt)| {
                let k = source.draw(attempt);
                (slot, evaluate_pair(fine, coarse, &k, attempt))
            })
            .collect();
        let mut retry_slots = Vec::new();
        for (slot, result) in batch {
            match result {
                Ok(eps) => slots[slot] = Some(eps),
                Err(record) => {
                    failures.push(record);
                    retry_slots.push(slot);
                }
            }
        }
        pending.clear();
        if policy == FailurePolicy::Replace {
            for slot in retry_slots {
                if next_attempt >= budget {
                    let succeeded = slots.iter().filter(|s| s.is_some()).count();
                    return Err(BaeError::BudgetExhausted {
                        attempts: next_attempt,
                        succeeded,
                        requested: q,
                        failed: failures.len(),
                    });
                }
                pending.push((slot, next_attempt));
                next_attempt += 1;
            }
        }
    }

    let members: Vec<DVector<f64>> = slots.into_iter().flatten().collect();
    if members.len() < 2 {
        return Err(BaeError::TooFewSurvivors {
            succeeded: members.len(),
        });
    }
    Ok(ErrorEnsemble {
        ensemble: SampleEnsemble::new(members)?,
        q_requested: q,
        q_failed: failures.len(),
        attempts: next_attempt,
        failures,
    })
}

fn evaluate_pair(
    fine: &dyn ForwardModel,
    coarse: &dyn ForwardModel,
    k: &DVector<f64>,
    attempt: u64,
) -> Result<DVector<f64>, FailureRecord> {
    let record = |stage: &'static str, e: ModelRunFailure| FailureRecord {
        attempt,
        stage,
        reason: e.to_string(),
    };
    let yf = fine.evaluate(k).map_err(|e| record("fine", e))?;
    let yg = coarse.evaluate(k).map_err(|e| record("coarse", e))?;
    Ok(yf - yg)
}

/// Ensemble mean and covariance of the approximation errors, plus provenance.
#[derive(Debug, Clone)]
pub struct ErrorStatistics {
    pub epsilon_mean: DVector<f64>,
    pub epsilon_cov: DMatrix<f64>,
    pub q_requested: usize,
    pub q_succeeded: usize,
    pub q_failed: usize,
    pub source: ErrorSource,
    pub seed: u64,
}

/// Reduce an error ensemble to its statistics (single-threaded, fixed order).
pub fn error_statistics(
    build: &ErrorEnsemble,
    source: ErrorSource,
    seed: u64,
) -> Result<ErrorStatistics, BaeError> {
    let (epsilon_mean, epsilon_cov) = estimate_moments(&build.ensemble)?;
    Ok(ErrorStatistics {
        epsilon_mean,
        epsilon_cov,
        q_requested: build.q_requested,
        q_succeeded: build.q_succeeded(),
        q_failed: build.q_failed,
        source,
        seed,
    })
}

/// Gaussian total error: measurement noise plus approximation error.
#[derive(Debug, Clone)]
pub struct TotalErrorModel {
    gaussian: GaussianModel,
}

impl TotalErrorModel {
    pub fn gaussian(&self) -> &GaussianModel {
        &self.gaussian
    }

    pub fn dim(&self) -> usize {
        self.gaussian.dim()
    }
}

/// Combine a noise model and error statistics into the total-error Gaussian
/// `N(e* + eps*, Gamma_e + Gamma_eps)`, refactorized with the jitter ladder.
pub fn total_error_model(
    noise: &GaussianModel,
    stats: &ErrorStatistics,
) -> Result<TotalErrorModel, BaeError> {
    if noise.dim() != stats.epsilon_mean.len() {
        return Err(BaeError::NoiseDimMismatch {
            noise: noise.dim(),
            errors: stats.epsilon_mean.len(),
        });
    }
    let mean = noise.mean() + &stats.epsilon_mean;
    let cov = noise.covariance() + &stats.epsilon_cov;
    let gaussian = GaussianModel::new(mean, cov, JitterPolicy::Escalate)?;
    // Surface factorization problems now rather than at first likelihood call.
    gaussian.factor()?;
    Ok(TotalErrorModel { gaussian })
}

/// Marginal shape diagnostics for one error component.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentDiagnostics {
    pub mean: f64,
    pub sd: f64,
    /// true when the component has (numerically) zero variance
    pub degenerate: bool,
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    /// standardized empirical quantiles at [`QUANTILE_LEVELS`]
    pub standardized_quantiles: Vec<Option<f64>>,
}

pub const QUANTILE_LEVELS: [f64; 9] = [0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99];

/// Advisory normality report: per-component moments and QQ-plot data.
#[derive(Debug, Clone)]
pub struct NormalityReport {
    pub components: Vec<ComponentDiagnostics>,
    /// per component: (standard-normal quantile, standardized empirical value)
    pub qq: Vec<Vec<(f64, f64)>>,
}

/// Per-component skewness, excess kurtosis and standardized quantile tables.
///
/// Purely advisory: the composite error model assumes Gaussian errors and
/// this is the evidence a user inspects, but nothing downstream enforces a
/// threshold.
pub fn normality_diagnostics(ensemble: &SampleEnsemble) -> Result<NormalityReport, BaeError> {
    let q = ensemble.count();
    if q < 8 {
        return Err(BaeError::TooFewForDiagnostics { got: q });
    }
    let d = ensemble.dim();
    let qf = q as f64;
    let mut components = Vec::with_capacity(d);
    let mut qq = Vec::with_capacity(d);
    for c in 0..d {
        let mut values: Vec<f64> = ensemble.iter().map(|s| s[c]).collect();
        let mean = values.iter().sum::<f64>() / qf;
        let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / qf;
        let sd = m2.sqrt();
        let scale = values.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        let degenerate = sd == 0.0 || sd <= scale * 1e-12;
        let (skewness, excess_kurtosis) = if degenerate {
            (None, None)
        } else {
            let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / qf;
            let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / qf;
            (Some(m3 / m2.powf(1.5)), Some(m4 / (m2 * m2) - 3.0))
        };
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let standardized_quantiles = QUANTILE_LEVELS
            .iter()
            .map(|&level| {
                if degenerate {
                    None
                } else {
                    Some((empirical_quantile(&values, level) - mean) / sd)
                }
            })
            .collect();
        let component_qq: Vec<(f64, f64)> = (0..q)
            .map(|r| {
                let level = (r as f64 + 0.5) / qf;
                let standardized = if degenerate {
                    0.0
                } else {
                    (values[r] - mean) / sd
                };
                (standard_normal_quantile(level), standardized)
            })
            .collect();
        components.push(ComponentDiagnostics {
            mean,
            sd,
            degenerate,
            skewness,
            excess_kurtosis,
            standardized_quantiles,
        });
        qq.push(component_qq);
    }
    Ok(NormalityReport { components, qq })
}

/// Linear-interpolation empirical quantile of pre-sorted values.
pub fn empirical_quantile(sorted: &[f64], level: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&level));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = level * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

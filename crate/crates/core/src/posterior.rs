//! Posterior assembly: priors, naive and error-corrected log-posteriors,
//! synthetic data generation, posterior predictive checks and feasibility
//! summaries.
//!
//! The naive posterior scores the residual `y_obs - g(k)` against the
//! measurement-noise model alone; the corrected posterior scores the same
//! residual against the total-error model. Forward-model failures inside a
//! log-posterior evaluation map to `-inf` (the proposal is rejected) and are
//! counted as telemetry rather than propagated as errors, so the Markov
//! kernel stays well defined.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

use crate::bae::{empirical_quantile, TotalErrorModel};
use crate::forward::{ForwardModel, ModelRunFailure, ObservationVector, ParameterVector};
use crate::probability::{GaussianModel, ParameterSource, ProbabilityError};
use crate::rng::SeedStream;
use crate::sampler::{subsample, Chain, SamplerError};

#[derive(Debug, Error)]
pub enum PosteriorError {
    #[error("dimension mismatch: {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("uniform-box prior needs finite lower < upper per coordinate (coordinate {0})")]
    BadBox(usize),
    #[error("the truth parameter must be simulable: {0}")]
    TruthNotSimulable(#[from] ModelRunFailure),
    #[error("problem has no total-error model attached")]
    NoTotalError,
    #[error("quantile level {0} outside (0, 1)")]
    BadQuantileLevel(f64),
    #[error("{failed} of {requested} predictive model runs failed (more than 20%)")]
    ExcessivePredictiveFailures { failed: usize, requested: usize },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Probability(#[from] ProbabilityError),
}

/// Prior over the parameter vector.
#[derive(Debug, Clone)]
pub enum PriorSpec {
    Gaussian(GaussianModel),
    UniformBox {
        lower: DVector<f64>,
        upper: DVector<f64>,
    },
}

impl PriorSpec {
    /// Uniform box with the same bounds in every coordinate.
    pub fn uniform_box_uniform_bounds(
        d: usize,
        lower: f64,
        upper: f64,
    ) -> Result<Self, PosteriorError> {
        PriorSpec::uniform_box(
            DVector::from_element(d, lower),
            DVector::from_element(d, upper),
        )
    }

    pub fn uniform_box(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, PosteriorError> {
        if lower.len() != upper.len() {
            return Err(PosteriorError::DimensionMismatch {
                what: "box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for i in 0..lower.len() {
            if !lower[i].is_finite() || !upper[i].is_finite() || lower[i] >= upper[i] {
                return Err(PosteriorError::BadBox(i));
            }
        }
        Ok(PriorSpec::UniformBox { lower, upper })
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::Gaussian(model) => model.dim(),
            PriorSpec::UniformBox { lower, .. } => lower.len(),
        }
    }

    /// Log prior density; `-inf` outside the support. The uniform box is
    /// normalized so reported values are comparable across boxes.
    pub fn log_density(&self, k: &DVector<f64>) -> f64 {
        match self {
            PriorSpec::Gaussian(model) => model.log_density(k).unwrap_or(f64::NEG_INFINITY),
            PriorSpec::UniformBox { lower, upper } => {
                for i in 0..lower.len() {
                    if k[i] < lower[i] || k[i] > upper[i] {
                        return f64::NEG_INFINITY;
                    }
                }
                -(0..lower.len())
                    .map(|i| (upper[i] - lower[i]).ln())
                    .sum::<f64>()
            }
        }
    }

    pub fn contains(&self, k: &DVector<f64>) -> bool {
        self.log_density(k).is_finite()
    }

    /// Indexed draw source for this prior.
    pub fn source(&self, stream: SeedStream) -> PriorSource {
        PriorSource {
            prior: self.clone(),
            stream,
        }
    }
}

/// [`ParameterSource`] view of a prior: one substream per attempt.
pub struct PriorSource {
    prior: PriorSpec,
    stream: SeedStream,
}

impl ParameterSource for PriorSource {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn draw(&self, attempt: u64) -> DVector<f64> {
        let stream = self.stream.index(attempt);
        match &self.prior {
            PriorSpec::Gaussian(model) => model
                .sample_one(&stream)
                .expect("prior covariance factorizes"),
            PriorSpec::UniformBox { lower, upper } => {
                let mut rng = stream.rng();
                DVector::from_fn(lower.len(), |i, _| {
                    let u: f64 = rand::Rng::random(&mut rng);
                    lower[i] + u * (upper[i] - lower[i])
                })
            }
        }
    }
}

/// Compact walker-initialization cloud: a tight Gaussian ball around a
/// center, clipped to the prior support.
///
/// Stretch-move ensembles recover well from an underdispersed compact start
/// but cannot rescue isolated walkers stranded in negligible-probability
/// basins, which is exactly what overdispersed prior draws produce on
/// ridge-shaped posteriors. `scale` is the per-coordinate ball width.
pub struct BallSource {
    center: DVector<f64>,
    scale: DVector<f64>,
    prior: PriorSpec,
    stream: SeedStream,
}

impl BallSource {
    pub fn new(
        center: DVector<f64>,
        scale: DVector<f64>,
        prior: PriorSpec,
        stream: SeedStream,
    ) -> Self {
        BallSource {
            center,
            scale,
            prior,
            stream,
        }
    }

    /// Ball around `center` sized as `relative_scale` of the prior's natural
    /// per-coordinate spread (box width, or Gaussian sd).
    pub fn around(
        center: DVector<f64>,
        relative_scale: f64,
        prior: &PriorSpec,
        stream: SeedStream,
    ) -> Self {
        let scale = match prior {
            PriorSpec::UniformBox { lower, upper } => {
                DVector::from_fn(lower.len(), |i, _| relative_scale * (upper[i] - lower[i]))
            }
            PriorSpec::Gaussian(model) => DVector::from_fn(model.dim(), |i, _| {
                relative_scale * model.covariance()[(i, i)].sqrt()
            }),
        };
        BallSource::new(center, scale, prior.clone(), stream)
    }
}

impl ParameterSource for BallSource {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn draw(&self, attempt: u64) -> DVector<f64> {
        let mut rng = self.stream.index(attempt).rng();
        // Rejection within the deterministic per-attempt stream; falls back
        // to clamping into a box if the support is never hit.
        for _ in 0..256 {
            let candidate = DVector::from_fn(self.center.len(), |i, _| {
                let z: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                self.center[i] + self.scale[i] * z
            });
            if self.prior.contains(&candidate) {
                return candidate;
            }
        }
        match &self.prior {
            PriorSpec::UniformBox { lower, upper } => DVector::from_fn(
                self.center.len(),
                |i, _| self.center[i].clamp(lower[i], upper[i]),
            ),
            PriorSpec::Gaussian(_) => self.center.clone(),
        }
    }
}

/// A fully specified inverse problem: model, prior, noise, data and
/// (optionally) a total-error model for the corrected likelihood.
pub struct InverseProblem {
    model: Arc<dyn ForwardModel>,
    prior: PriorSpec,
    noise: GaussianModel,
    y_obs: ObservationVector,
    total_error: Option<TotalErrorModel>,
    model_failures: AtomicU64,
}

impl InverseProblem {
    pub fn new(
        model: Arc<dyn ForwardModel>,
        prior: PriorSpec,
        noise: GaussianModel,
        y_obs: ObservationVector,
    ) -> Result<Self, PosteriorError> {
        if prior.dim() != model.input_dim() {
            return Err(PosteriorError::DimensionMismatch {
                what: "prior vs model input",
                expected: model.input_dim(),
                got: prior.dim(),
            });
        }
        if noise.dim() != model.output_dim() {
            return Err(PosteriorError::DimensionMismatch {
                what: "noise vs model output",
                expected: model.output_dim(),
                got: noise.dim(),
            });
        }
        if y_obs.len() != model.output_dim() {
            return Err(PosteriorError::DimensionMismatch {
                what: "data vs model output",
                expected: model.output_dim(),
                got: y_obs.len(),
            });
        }
        noise.factor()?;
        Ok(InverseProblem {
            model,
            prior,
            noise,
            y_obs,
            total_error: None,
            model_failures: AtomicU64::new(0),
        })
    }

    pub fn with_total_error(
        mut self,
        total_error: TotalErrorModel,
    ) -> Result<Self, PosteriorError> {
        if total_error.dim() != self.y_obs.len() {
            return Err(PosteriorError::DimensionMismatch {
                what: "total error vs data",
                expected: self.y_obs.len(),
                got: total_error.dim(),
            });
        }
        self.total_error = Some(total_error);
        Ok(self)
    }

    pub fn model(&self) -> &Arc<dyn ForwardModel> {
        &self.model
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn noise(&self) -> &GaussianModel {
        &self.noise
    }

    pub fn y_obs(&self) -> &ObservationVector {
        &self.y_obs
    }

    pub fn total_error(&self) -> Option<&TotalErrorModel> {
        self.total_error.as_ref()
    }

    /// Forward-model failures absorbed into `-inf` so far.
    pub fn model_failure_count(&self) -> u64 {
        self.model_failures.load(Ordering::Relaxed)
    }

    fn log_posterior_with(&self, error_model: &GaussianModel, k: &ParameterVector) -> f64 {
        let log_prior = self.prior.log_density(k);
        if !log_prior.is_finite() {
            return f64::NEG_INFINITY;
        }
        let y = match self.model.evaluate(k) {
            Ok(y) => y,
            Err(_) => {
                self.model_failures.fetch_add(1, Ordering::Relaxed);
                return f64::NEG_INFINITY;
            }
        };
        let residual = &self.y_obs - y;
        match error_model.log_density(&residual) {
            Ok(log_likelihood) => log_likelihood + log_prior,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Log posterior under the measurement-noise-only likelihood.
    pub fn naive_log_posterior(&self, k: &ParameterVector) -> f64 {
        self.log_posterior_with(&self.noise, k)
    }

    /// Log posterior under the total-error likelihood.
    pub fn bae_log_posterior(&self, k: &ParameterVector) -> Result<f64, PosteriorError> {
        let total = self
            .total_error
            .as_ref()
            .ok_or(PosteriorError::NoTotalError)?;
        Ok(self.log_posterior_with(total.gaussian(), k))
    }

    /// Closure form of [`Self::naive_log_posterior`] for the sampler.
    pub fn naive_evaluator(&self) -> impl Fn(&DVector<f64>) -> f64 + Sync + '_ {
        move |k| self.naive_log_posterior(k)
    }

    /// Closure form of [`Self::bae_log_posterior`]; fails fast when no
    /// total-error model is attached.
    pub fn bae_evaluator(
        &self,
    ) -> Result<impl Fn(&DVector<f64>) -> f64 + Sync + '_, PosteriorError> {
        let total = self
            .total_error
            .as_ref()
            .ok_or(PosteriorError::NoTotalError)?;
        Ok(move |k: &DVector<f64>| self.log_posterior_with(total.gaussian(), k))
    }
}

/// Clean and noise-corrupted synthetic observations.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub y_clean: ObservationVector,
    pub y_obs: ObservationVector,
}

/// Run the fine model at `truth` and corrupt the output with a noise draw.
///
/// A fine-model failure at the truth is a hard error: synthetic studies
/// require a simulable truth.
pub fn synthesize_data(
    truth: &ParameterVector,
    fine: &dyn ForwardModel,
    noise: &GaussianModel,
    stream: &SeedStream,
) -> Result<SyntheticData, PosteriorError> {
    let y_clean = fine.evaluate(truth)?;
    if noise.dim() != y_clean.len() {
        return Err(PosteriorError::DimensionMismatch {
            what: "noise vs model output",
            expected: y_clean.len(),
            got: noise.dim(),
        });
    }
    let draw = noise.sample_one(stream)?;
    let y_obs = &y_clean + draw;
    Ok(SyntheticData { y_clean, y_obs })
}

/// Posterior predictive summary: per-observation quantiles of noiseless model
/// outputs over posterior draws.
#[derive(Debug, Clone)]
pub struct PredictiveSummary {
    pub levels: Vec<f64>,
    /// rows: observation index, columns: levels
    pub quantiles: DMatrix<f64>,
    /// the raw noiseless curves, in draw order
    pub curves: Vec<ObservationVector>,
    pub n_requested: usize,
    pub n_failed: usize,
}

pub const DEFAULT_PREDICTIVE_LEVELS: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

/// Evaluate `model` on `n_draws` parameters subsampled from the chain and
/// reduce to per-observation empirical quantiles.
///
/// Fails if more than 20% of the draws cannot be simulated.
pub fn posterior_predictive(
    chain: &Chain,
    model: &dyn ForwardModel,
    n_draws: usize,
    levels: &[f64],
    stream: &SeedStream,
) -> Result<PredictiveSummary, PosteriorError> {
    for &level in levels {
        if !(level > 0.0 && level < 1.0) {
            return Err(PosteriorError::BadQuantileLevel(level));
        }
    }
    let draws = subsample(chain, n_draws, stream)?;
    let outcomes: Vec<Result<ObservationVector, ModelRunFailure>> = draws
        .samples()
        .par_iter()
        .map(|k| model.evaluate(k))
        .collect();
    let curves: Vec<ObservationVector> = outcomes.iter().flatten().cloned().collect();
    let n_failed = n_draws - curves.len();
    if n_failed * 5 > n_draws {
        return Err(PosteriorError::ExcessivePredictiveFailures {
            failed: n_failed,
            requested: n_draws,
        });
    }
    let m = model.output_dim();
    let mut quantiles = DMatrix::zeros(m, levels.len());
    for obs in 0..m {
        let mut values: Vec<f64> = curves.iter().map(|c| c[obs]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (col, &level) in levels.iter().enumerate() {
            quantiles[(obs, col)] = empirical_quantile(&values, level);
        }
    }
    Ok(PredictiveSummary {
        levels: levels.to_vec(),
        quantiles,
        curves,
        n_requested: n_draws,
        n_failed,
    })
}

/// One central credible interval and its truth check.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalCheck {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    pub contains_truth: bool,
}

/// Feasibility of one parameter: does the posterior support the truth?
#[derive(Debug, Clone, Serialize)]
pub struct ParamFeasibility {
    pub index: usize,
    pub truth: f64,
    pub posterior_mean: f64,
    pub posterior_sd: f64,
    pub intervals: Vec<IntervalCheck>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub levels: Vec<f64>,
    pub parameters: Vec<ParamFeasibility>,
}

impl FeasibilityReport {
    /// True when the truth lies inside the central interval of every
    /// parameter at `level`.
    pub fn all_contained_at(&self, level: f64) -> bool {
        self.parameters.iter().all(|p| {
            p.intervals
                .iter()
                .any(|i| i.level == level && i.contains_truth)
        })
    }

    /// Parameters whose central interval at `level` excludes the truth.
    pub fn excluded_at(&self, level: f64) -> Vec<usize> {
        self.parameters
            .iter()
            .filter(|p| {
                p.intervals
                    .iter()
                    .any(|i| i.level == level && !i.contains_truth)
            })
            .map(|p| p.index)
            .collect()
    }
}

pub const DEFAULT_FEASIBILITY_LEVELS: [f64; 2] = [0.95, 0.99];

/// Central credible intervals per parameter from marginal empirical
/// quantiles, with truth-containment flags (synthetic studies only).
pub fn feasibility_summary(
    chain: &Chain,
    truth: &ParameterVector,
    levels: &[f64],
) -> Result<FeasibilityReport, PosteriorError> {
    if truth.len() != chain.dim() {
        return Err(PosteriorError::DimensionMismatch {
            what: "truth vs chain",
            expected: chain.dim(),
            got: truth.len(),
        });
    }
    for &level in levels {
        if !(level > 0.0 && level < 1.0) {
            return Err(PosteriorError::BadQuantileLevel(level));
        }
    }
    let (mean, sd) = chain.marginal_moments();
    let mut parameters = Vec::with_capacity(chain.dim());
    for coord in 0..chain.dim() {
        let sorted = chain.sorted_coordinate(coord);
        let intervals = levels
            .iter()
            .map(|&level| {
                let tail = (1.0 - level) / 2.0;
                let lower = empirical_quantile(&sorted, tail);
                let upper = empirical_quantile(&sorted, 1.0 - tail);
                IntervalCheck {
                    level,
                    lower,
                    upper,
                    contains_truth: truth[coord] >= lower && truth[coord] <= upper,
                }
            })
            .collect();
        parameters.push(ParamFeasibility {
            index: coord,
            truth: truth[coord],
            posterior_mean: mean[coord],
            posterior_sd: sd[coord],
            intervals,
        });
    }
    Ok(FeasibilityReport {
        levels: levels.to_vec(),
        parameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bae::{error_statistics, total_error_model, ErrorEnsemble, ErrorSource};
    use crate::forward::polynomial::{equally_spaced, polynomial_pair, LinearModel};
    use crate::probability::{JitterPolicy, SampleEnsemble};
    use approx::assert_relative_eq;

    fn identity_model(d: usize) -> Arc<dyn ForwardModel> {
        Arc::new(LinearModel::new(DMatrix::identity(d, d)))
    }

    fn box_prior(d: usize, lo: f64, hi: f64) -> PriorSpec {
        PriorSpec::uniform_box_uniform_bounds(d, lo, hi).unwrap()
    }

    fn zero_gap_total(noise: &GaussianModel) -> TotalErrorModel {
        let ensemble = SampleEnsemble::new(vec![DVector::zeros(noise.dim()); 4]).unwrap();
        let build = ErrorEnsemble {
            ensemble,
            q_requested: 4,
            q_failed: 0,
            attempts: 4,
            failures: vec![],
        };
        let stats = error_statistics(&build, ErrorSource::PriorBased, 0).unwrap();
        total_error_model(noise, &stats).unwrap()
    }

    #[test]
    fn exact_fit_scores_noise_mode_plus_prior_constant() {
        let d = 3;
        let y_obs = DVector::from_vec(vec![0.1, -0.4, 2.0]);
        let noise = GaussianModel::isotropic(DVector::zeros(d), 1.5).unwrap();
        let problem = InverseProblem::new(
            identity_model(d),
            box_prior(d, -5.0, 5.0),
            noise.clone(),
            y_obs.clone(),
        )
        .unwrap();
        let lp = problem.naive_log_posterior(&y_obs);
        let expected = noise.log_density(&DVector::zeros(d)).unwrap() - 3.0 * (10.0f64).ln();
        assert_relative_eq!(lp, expected, epsilon = 1e-12);
    }

    #[test]
    fn outside_box_is_minus_infinity() {
        let d = 2;
        let noise = GaussianModel::standard(d);
        let problem = InverseProblem::new(
            identity_model(d),
            box_prior(d, -1.0, 1.0),
            noise.clone(),
            DVector::zeros(d),
        )
        .unwrap()
        .with_total_error(zero_gap_total(&noise))
        .unwrap();
        let outside = DVector::from_vec(vec![0.0, 1.5]);
        assert_eq!(problem.naive_log_posterior(&outside), f64::NEG_INFINITY);
        // Prior dominance applies to the corrected posterior too.
        assert_eq!(
            problem.bae_log_posterior(&outside).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn zero_gap_total_error_reproduces_naive_pointwise() {
        let t = equally_spaced(0.0, 1.0, 12);
        let (fine, _) = polynomial_pair(&t, 2, 1).unwrap();
        let noise = GaussianModel::isotropic(DVector::zeros(12), 0.8).unwrap();
        let y_obs = fine.evaluate(&DVector::from_vec(vec![0.5, 1.5])).unwrap();
        let problem = InverseProblem::new(
            Arc::new(fine),
            box_prior(2, -10.0, 10.0),
            noise.clone(),
            y_obs,
        )
        .unwrap()
        .with_total_error(zero_gap_total(&noise))
        .unwrap();
        let stream = SeedStream::root(9).child("draws");
        for i in 0..100 {
            let mut rng = stream.index(i).rng();
            let k = DVector::from_fn(2, |_, _| rand::Rng::random_range(&mut rng, -9.0..9.0));
            let naive = problem.naive_log_posterior(&k);
            let bae = problem.bae_log_posterior(&k).unwrap();
            assert!(
                (naive - bae).abs() < 1e-12,
                "draw {i}: naive {naive} vs bae {bae}"
            );
        }
    }

    #[test]
    fn residual_shift_invariance() {
        // Adding a constant vector to both y_obs and the total-error mean
        // leaves the corrected posterior unchanged.
        let t = equally_spaced(0.0, 1.0, 8);
        let (fine, coarse) = polynomial_pair(&t, 2, 1).unwrap();
        let noise = GaussianModel::isotropic(DVector::zeros(8), 1.0).unwrap();
        let y_obs = fine.evaluate(&DVector::from_vec(vec![0.2, 2.0])).unwrap();
        let shift = DVector::from_element(8, 3.7);

        let eps_mean = DVector::from_element(8, 0.5);
        let eps_cov = DMatrix::identity(8, 8) * 0.25;
        let total = |mean: DVector<f64>| {
            let stats = crate::bae::ErrorStatistics {
                epsilon_mean: mean,
                epsilon_cov: eps_cov.clone(),
                q_requested: 10,
                q_succeeded: 10,
                q_failed: 0,
                source: ErrorSource::PriorBased,
                seed: 0,
            };
            total_error_model(&noise, &stats).unwrap()
        };
        let base = InverseProblem::new(
            Arc::new(coarse.clone()),
            box_prior(2, -10.0, 10.0),
            noise.clone(),
            y_obs.clone(),
        )
        .unwrap()
        .with_total_error(total(eps_mean.clone()))
        .unwrap();
        let shifted = InverseProblem::new(
            Arc::new(coarse),
            box_prior(2, -10.0, 10.0),
            noise.clone(),
            &y_obs + &shift,
        )
        .unwrap()
        .with_total_error(total(&eps_mean + &shift))
        .unwrap();
        for k in [
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, -2.0]),
            DVector::from_vec(vec![-3.3, 4.4]),
        ] {
            assert_relative_eq!(
                base.bae_log_posterior(&k).unwrap(),
                shifted.bae_log_posterior(&k).unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn corrected_likelihood_depends_only_on_residual() {
        // Model with a null direction: two parameters with equal residual get
        // equal log posterior under a flat prior.
        let mut matrix = DMatrix::zeros(3, 2);
        matrix[(0, 0)] = 1.0;
        matrix[(1, 0)] = -2.0;
        matrix[(2, 0)] = 0.5;
        let model = LinearModel::new(matrix);
        let noise = GaussianModel::isotropic(DVector::zeros(3), 1.0).unwrap();
        let problem = InverseProblem::new(
            Arc::new(model),
            box_prior(2, -10.0, 10.0),
            noise.clone(),
            DVector::from_vec(vec![0.3, 0.1, -0.2]),
        )
        .unwrap()
        .with_total_error(zero_gap_total(&noise))
        .unwrap();
        let a = DVector::from_vec(vec![1.2, -4.0]);
        let b = DVector::from_vec(vec![1.2, 6.0]);
        assert_relative_eq!(
            problem.bae_log_posterior(&a).unwrap(),
            problem.bae_log_posterior(&b).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn model_failures_become_minus_infinity_with_telemetry() {
        struct FailAboveOne;
        impl ForwardModel for FailAboveOne {
            fn input_dim(&self) -> usize {
                1
            }
            fn output_dim(&self) -> usize {
                1
            }
            fn evaluate(&self, k: &ParameterVector) -> Result<ObservationVector, ModelRunFailure> {
                if k[0] > 1.0 {
                    Err(ModelRunFailure::SimulatorError("blow-up".to_string()))
                } else {
                    Ok(k.clone())
                }
            }
        }
        let problem = InverseProblem::new(
            Arc::new(FailAboveOne),
            box_prior(1, -5.0, 5.0),
            GaussianModel::standard(1),
            DVector::zeros(1),
        )
        .unwrap();
        assert!(problem
            .naive_log_posterior(&DVector::from_vec(vec![0.5]))
            .is_finite());
        assert_eq!(
            problem.naive_log_posterior(&DVector::from_vec(vec![2.0])),
            f64::NEG_INFINITY
        );
        assert_eq!(problem.model_failure_count(), 1);
    }

    #[test]
    fn synthesize_with_zero_noise_returns_clean_output() {
        let t = equally_spaced(0.0, 1.0, 6);
        let (fine, _) = polynomial_pair(&t, 2, 1).unwrap();
        let truth = DVector::from_vec(vec![0.2, 2.0]);
        let noise = GaussianModel::new(
            DVector::zeros(6),
            DMatrix::zeros(6, 6),
            JitterPolicy::Disabled,
        )
        .unwrap();
        let data = synthesize_data(&truth, &fine, &noise, &SeedStream::root(3).child("d")).unwrap();
        assert_eq!(data.y_obs, data.y_clean);
        assert_eq!(data.y_clean, fine.evaluate(&truth).unwrap());
    }

    #[test]
    fn synthesize_noise_within_5_sigma_band() {
        use crate::forward::{SliceConfig, SliceModel};
        let fine = SliceModel::new(SliceConfig::with_grid(8, 10).unwrap());
        let truth = DVector::from_vec(vec![
            -13.0, -13.5, -16.0, -16.5, -13.0, -13.5, -13.5, -13.0, -14.0, -14.5, -16.0, -16.0,
        ]);
        let sd = 5.0;
        let noise = GaussianModel::isotropic(DVector::zeros(105), sd).unwrap();
        let data = synthesize_data(&truth, &fine, &noise, &SeedStream::root(77).child("n")).unwrap();
        let max_dev = (&data.y_obs - &data.y_clean).amax();
        assert!(max_dev < 5.0 * sd, "noise draw {max_dev} exceeds 5 sigma");
        assert!(max_dev > 0.0);
    }

    #[test]
    fn synthesize_is_deterministic() {
        let t = equally_spaced(0.0, 1.0, 6);
        let (fine, _) = polynomial_pair(&t, 2, 1).unwrap();
        let truth = DVector::from_vec(vec![0.2, 2.0]);
        let noise = GaussianModel::isotropic(DVector::zeros(6), 1.2).unwrap();
        let stream = SeedStream::root(5).child("synth");
        let a = synthesize_data(&truth, &fine, &noise, &stream).unwrap();
        let b = synthesize_data(&truth, &fine, &noise, &stream).unwrap();
        assert_eq!(a.y_obs, b.y_obs);
    }

    fn chain_of(samples: Vec<DVector<f64>>) -> Chain {
        let n = samples.len();
        Chain::from_parts(
            1,
            n,
            samples[0].len(),
            samples,
            vec![0.0; n],
            vec![true; n],
            0,
            0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn predictive_of_constant_chain_collapses() {
        let k = DVector::from_vec(vec![0.7]);
        let chain = chain_of(vec![k.clone(); 30]);
        let model = LinearModel::new(DMatrix::from_vec(1, 1, vec![2.0]));
        let summary = posterior_predictive(
            &chain,
            &model,
            10,
            &DEFAULT_PREDICTIVE_LEVELS,
            &SeedStream::root(1).child("p"),
        )
        .unwrap();
        for col in 0..summary.levels.len() {
            assert_relative_eq!(summary.quantiles[(0, col)], 1.4, epsilon = 1e-12);
        }
    }

    #[test]
    fn predictive_median_of_standard_normal_chain() {
        let model = GaussianModel::standard(1);
        let draws = model
            .sample(4000, &SeedStream::root(31).child("chain"))
            .unwrap();
        let chain = chain_of(draws.samples().to_vec());
        let identity = LinearModel::new(DMatrix::identity(1, 1));
        let summary = posterior_predictive(
            &chain,
            &identity,
            2000,
            &DEFAULT_PREDICTIVE_LEVELS,
            &SeedStream::root(32).child("p"),
        )
        .unwrap();
        let median = summary.quantiles[(0, 2)];
        assert!(median.abs() < 0.1, "median {median}");
    }

    #[test]
    fn predictive_quantiles_are_monotone() {
        let model = GaussianModel::standard(2);
        let draws = model
            .sample(500, &SeedStream::root(33).child("chain"))
            .unwrap();
        let chain = chain_of(draws.samples().to_vec());
        let map = LinearModel::new(DMatrix::from_row_slice(
            3,
            2,
            &[1.0, 0.5, -0.7, 2.0, 0.0, 1.0],
        ));
        let summary = posterior_predictive(
            &chain,
            &map,
            200,
            &DEFAULT_PREDICTIVE_LEVELS,
            &SeedStream::root(34).child("p"),
        )
        .unwrap();
        for obs in 0..3 {
            for col in 1..summary.levels.len() {
                assert!(summary.quantiles[(obs, col)] >= summary.quantiles[(obs, col - 1)]);
            }
        }
    }

    #[test]
    fn predictive_rejects_excessive_failures() {
        struct MostlyBroken;
        impl ForwardModel for MostlyBroken {
            fn input_dim(&self) -> usize {
                1
            }
            fn output_dim(&self) -> usize {
                1
            }
            fn evaluate(&self, k: &ParameterVector) -> Result<ObservationVector, ModelRunFailure> {
                if k[0].abs() < 0.2 {
                    Ok(k.clone())
                } else {
                    Err(ModelRunFailure::SimulatorError("broken".to_string()))
                }
            }
        }
        let model = GaussianModel::standard(1);
        let draws = model.sample(200, &SeedStream::root(35).child("c")).unwrap();
        let chain = chain_of(draws.samples().to_vec());
        let result = posterior_predictive(
            &chain,
            &MostlyBroken,
            100,
            &DEFAULT_PREDICTIVE_LEVELS,
            &SeedStream::root(36).child("p"),
        );
        assert!(matches!(
            result,
            Err(PosteriorError::ExcessivePredictiveFailures { .. })
        ));
    }

    #[test]
    fn feasibility_degenerate_chain_contains_truth() {
        let truth = DVector::from_vec(vec![1.0, -2.0]);
        let chain = chain_of(vec![truth.clone(); 50]);
        let report = feasibility_summary(&chain, &truth, &DEFAULT_FEASIBILITY_LEVELS).unwrap();
        for p in &report.parameters {
            assert_eq!(p.posterior_sd, 0.0);
            for interval in &p.intervals {
                assert!(interval.contains_truth);
                assert_eq!(interval.lower, interval.upper);
            }
        }
        assert!(report.all_contained_at(0.95));
    }

    #[test]
    fn feasibility_coverage_calibrated() {
        // Chains of iid N(truth, 1) draws: the 95% interval contains the
        // truth in about 95% of replications (binomial band over 200 reps).
        let truth = DVector::from_vec(vec![0.5]);
        let model = GaussianModel::new(
            truth.clone(),
            DMatrix::identity(1, 1),
            JitterPolicy::Escalate,
        )
        .unwrap();
        let reps = 200;
        let mut contained = 0;
        for rep in 0..reps {
            let draws = model
                .sample(400, &SeedStream::root(91).child("rep").index(rep))
                .unwrap();
            let chain = chain_of(draws.samples().to_vec());
            let report = feasibility_summary(&chain, &truth, &[0.95]).unwrap();
            if report.all_contained_at(0.95) {
                contained += 1;
            }
        }
        // Binomial(200, 0.95): mean 190, sd ~ 3.1. Allow ~4 sigma.
        assert!(
            (178..=200).contains(&contained),
            "contained {contained}/200"
        );
    }

    #[test]
    fn feasibility_flags_biased_overconfident_chain() {
        let truth = DVector::from_vec(vec![0.0]);
        let biased_mean = DVector::from_vec(vec![10.0]);
        let model = GaussianModel::new(
            biased_mean,
            DMatrix::identity(1, 1) * 0.01,
            JitterPolicy::Escalate,
        )
        .unwrap();
        let draws = model.sample(500, &SeedStream::root(92).child("b")).unwrap();
        let chain = chain_of(draws.samples().to_vec());
        let report = feasibility_summary(&chain, &truth, &DEFAULT_FEASIBILITY_LEVELS).unwrap();
        for level in DEFAULT_FEASIBILITY_LEVELS {
            assert_eq!(report.excluded_at(level), vec![0]);
        }
    }

    #[test]
    fn prior_source_draws_stay_in_box() {
        let prior = box_prior(3, -2.0, -1.0);
        let source = prior.source(SeedStream::root(55).child("prior"));
        for attempt in 0..100 {
            let k = source.draw(attempt);
            assert!(prior.contains(&k));
        }
    }

    #[test]
    fn gaussian_prior_log_density_matches_model() {
        let model = GaussianModel::standard(2);
        let prior = PriorSpec::Gaussian(model.clone());
        let k = DVector::from_vec(vec![0.3, -0.4]);
        assert_relative_eq!(
            prior.log_density(&k),
            model.log_density(&k).unwrap(),
            epsilon = 1e-14
        );
    }
}

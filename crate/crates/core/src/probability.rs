//! Dense Gaussian machinery: log-densities, sampling, moment estimation and
//! covariance factorization.
//!
//! Everything downstream (priors, noise models, total-error models, analytic
//! posteriors) is a [`GaussianModel`]. Densities are only ever computed in
//! log space, and always through the cached triangular factor — never through
//! an explicit inverse.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::linalg;
use crate::rng::SeedStream;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum ProbabilityError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error(
        "covariance could not be factorized (jitter ladder exhausted at {max_jitter:.3e}); \
         matrix is badly indefinite"
    )]
    DegenerateCovariance { max_jitter: f64 },
    #[error("covariance factor is singular; log-density undefined for a degenerate distribution")]
    SingularFactor,
    #[error("need at least 2 samples to estimate moments, got {got}")]
    InsufficientSamples { got: usize },
    #[error("ensemble members must share one dimension: expected {expected}, got {got}")]
    RaggedEnsemble { expected: usize, got: usize },
    #[error("ensemble must contain at least one sample")]
    EmptyEnsemble,
}

/// How factorization reacts to a covariance that is not positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum JitterPolicy {
    /// Try jitter 0, then `1e-12 * trace/d`, escalating tenfold up to
    /// `1e-4 * trace/d` (an absolute scale of 1 is used when the trace is
    /// zero). The value that succeeded is recorded.
    #[default]
    Escalate,
    /// No jitter. Rank-deficient PSD matrices are factored exactly (zero
    /// columns in the factor); sampling then lives on the degenerate support
    /// but log-densities are unavailable.
    Disabled,
}

const JITTER_LADDER_START: f64 = 1e-12;
const JITTER_LADDER_END: f64 = 1e-4;

/// Result of a jittered factorization: lower-triangular factor plus the
/// diagonal regularization that was applied.
#[derive(Debug, Clone)]
pub struct CovarianceFactor {
    pub lower: DMatrix<f64>,
    pub jitter_used: f64,
}

/// Factor a symmetrized covariance into `L L^T = cov + jitter * I`.
///
/// With [`JitterPolicy::Escalate`] the jitter ladder is climbed until a
/// strict Cholesky succeeds; with [`JitterPolicy::Disabled`] a single
/// PSD-tolerant factorization is attempted.
pub fn factorize(
    covariance: &DMatrix<f64>,
    policy: JitterPolicy,
) -> Result<CovarianceFactor, ProbabilityError> {
    if covariance.nrows() != covariance.ncols() {
        return Err(ProbabilityError::NotSquare {
            rows: covariance.nrows(),
            cols: covariance.ncols(),
        });
    }
    let sym = symmetrize(covariance);
    match policy {
        JitterPolicy::Disabled => match linalg::cholesky_psd(&sym) {
            Some(lower) => Ok(CovarianceFactor {
                lower,
                jitter_used: 0.0,
            }),
            None => Err(ProbabilityError::DegenerateCovariance { max_jitter: 0.0 }),
        },
        JitterPolicy::Escalate => {
            let d = sym.nrows().max(1) as f64;
            let mut scale = sym.trace() / d;
            if !(scale > 0.0) {
                scale = 1.0;
            }
            let mut jitter = 0.0;
            loop {
                let candidate = if jitter == 0.0 {
                    sym.clone()
                } else {
                    &sym + DMatrix::identity(sym.nrows(), sym.ncols()) * jitter
                };
                if let Some(lower) = linalg::cholesky_strict(&candidate) {
                    return Ok(CovarianceFactor {
                        lower,
                        jitter_used: jitter,
                    });
                }
                jitter = if jitter == 0.0 {
                    JITTER_LADDER_START * scale
                } else {
                    jitter * 10.0
                };
                if jitter > JITTER_LADDER_END * scale * (1.0 + 1e-12) {
                    return Err(ProbabilityError::DegenerateCovariance {
                        max_jitter: JITTER_LADDER_END * scale,
                    });
                }
            }
        }
    }
}

fn symmetrize(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (matrix + matrix.transpose())
}

/// Multivariate Gaussian with cached triangular factorization.
///
/// Immutable after construction and safe to share across threads; the factor
/// is computed lazily on first use.
#[derive(Debug)]
pub struct GaussianModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    policy: JitterPolicy,
    factor: OnceLock<Result<CovarianceFactor, ProbabilityError>>,
}

impl Clone for GaussianModel {
    fn clone(&self) -> Self {
        GaussianModel {
            mean: self.mean.clone(),
            covariance: self.covariance.clone(),
            policy: self.policy,
            factor: OnceLock::new(),
        }
    }
}

impl GaussianModel {
    pub fn new(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        policy: JitterPolicy,
    ) -> Result<Self, ProbabilityError> {
        if covariance.nrows() != covariance.ncols() {
            return Err(ProbabilityError::NotSquare {
                rows: covariance.nrows(),
                cols: covariance.ncols(),
            });
        }
        if covariance.nrows() != mean.len() {
            return Err(ProbabilityError::DimensionMismatch {
                expected: mean.len(),
                got: covariance.nrows(),
            });
        }
        Ok(GaussianModel {
            mean,
            covariance: symmetrize(&covariance),
            policy,
            factor: OnceLock::new(),
        })
    }

    /// Isotropic Gaussian `N(mean, sd^2 I)`.
    pub fn isotropic(mean: DVector<f64>, sd: f64) -> Result<Self, ProbabilityError> {
        let d = mean.len();
        let cov = DMatrix::identity(d, d) * (sd * sd);
        GaussianModel::new(mean, cov, JitterPolicy::Escalate)
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        GaussianModel::new(
            DVector::zeros(d),
            DMatrix::identity(d, d),
            JitterPolicy::Escalate,
        )
        .expect("identity covariance is valid")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Cached factorization, computing it on first access.
    pub fn factor(&self) -> Result<&CovarianceFactor, ProbabilityError> {
        let slot = self
            .factor
            .get_or_init(|| factorize(&self.covariance, self.policy));
        match slot {
            Ok(factor) => Ok(factor),
            Err(err) => Err(clone_error(err)),
        }
    }

    /// Diagonal regularization applied by the factorization, if any.
    pub fn jitter_used(&self) -> Result<f64, ProbabilityError> {
        Ok(self.factor()?.jitter_used)
    }

    /// Log-density of `x` under this Gaussian, evaluated through the factor.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64, ProbabilityError> {
        if x.len() != self.dim() {
            return Err(ProbabilityError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let factor = self.factor()?;
        let lower = &factor.lower;
        let mut log_det = 0.0;
        for i in 0..lower.nrows() {
            let pivot = lower[(i, i)];
            if pivot <= 0.0 {
                return Err(ProbabilityError::SingularFactor);
            }
            log_det += pivot.ln();
        }
        let centered = x - &self.mean;
        let u = linalg::solve_lower(lower, &centered);
        let quad = u.norm_squared();
        Ok(-0.5 * (quad + self.dim() as f64 * LN_2PI) - log_det)
    }

    /// Draw `n` samples `mean + L z` with standard-normal `z`, deterministic
    /// in the stream.
    pub fn sample(&self, n: usize, stream: &SeedStream) -> Result<SampleEnsemble, ProbabilityError> {
        let factor = self.factor()?;
        let mut rng = stream.rng();
        let d = self.dim();
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            samples.push(&self.mean + &factor.lower * z);
        }
        SampleEnsemble::new(samples)
    }

    /// One draw from the stream.
    pub fn sample_one(&self, stream: &SeedStream) -> Result<DVector<f64>, ProbabilityError> {
        let factor = self.factor()?;
        let mut rng = stream.rng();
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(&self.mean + &factor.lower * z)
    }
}

fn clone_error(err: &ProbabilityError) -> ProbabilityError {
    match err {
        ProbabilityError::DimensionMismatch { expected, got } => {
            ProbabilityError::DimensionMismatch {
                expected: *expected,
                got: *got,
            }
        }
        ProbabilityError::NotSquare { rows, cols } => ProbabilityError::NotSquare {
            rows: *rows,
            cols: *cols,
        },
        ProbabilityError::DegenerateCovariance { max_jitter } => {
            ProbabilityError::DegenerateCovariance {
                max_jitter: *max_jitter,
            }
        }
        ProbabilityError::SingularFactor => ProbabilityError::SingularFactor,
        ProbabilityError::InsufficientSamples { got } => {
            ProbabilityError::InsufficientSamples { got: *got }
        }
        ProbabilityError::RaggedEnsemble { expected, got } => ProbabilityError::RaggedEnsemble {
            expected: *expected,
            got: *got,
        },
        ProbabilityError::EmptyEnsemble => ProbabilityError::EmptyEnsemble,
    }
}

/// A set of equal-length sample vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEnsemble {
    samples: Vec<DVector<f64>>,
    dim: usize,
}

impl SampleEnsemble {
    pub fn new(samples: Vec<DVector<f64>>) -> Result<Self, ProbabilityError> {
        let dim = samples
            .first()
            .map(|s| s.len())
            .ok_or(ProbabilityError::EmptyEnsemble)?;
        for s in &samples {
            if s.len() != dim {
                return Err(ProbabilityError::RaggedEnsemble {
                    expected: dim,
                    got: s.len(),
                });
            }
        }
        Ok(SampleEnsemble { samples, dim })
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DVector<f64>> {
        self.samples.iter()
    }
}

/// Ensemble mean and covariance with the `1/(q-1)` divisor.
pub fn estimate_moments(
    ensemble: &SampleEnsemble,
) -> Result<(DVector<f64>, DMatrix<f64>), ProbabilityError> {
    let q = ensemble.count();
    if q < 2 {
        return Err(ProbabilityError::InsufficientSamples { got: q });
    }
    let d = ensemble.dim();
    let mut mean = DVector::zeros(d);
    for s in ensemble.iter() {
        mean += s;
    }
    mean /= q as f64;

    let mut cov = DMatrix::zeros(d, d);
    for s in ensemble.iter() {
        let centered = s - &mean;
        // Accumulate only the lower triangle, then mirror: keeps the result
        // exactly symmetric.
        for i in 0..d {
            for j in 0..=i {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let divisor = (q - 1) as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / divisor;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}

/// Indexed provider of parameter draws.
///
/// `draw(attempt)` must be deterministic in `attempt`, which makes consumers
/// reproducible under any parallel schedule: attempt indices, not thread
/// timing, decide what is drawn.
pub trait ParameterSource: Send + Sync {
    fn dim(&self) -> usize;
    fn draw(&self, attempt: u64) -> DVector<f64>;
}

/// Draws from a Gaussian, one substream per attempt index.
pub struct GaussianSource {
    model: GaussianModel,
    stream: SeedStream,
}

impl GaussianSource {
    pub fn new(model: GaussianModel, stream: SeedStream) -> Self {
        GaussianSource { model, stream }
    }
}

impl ParameterSource for GaussianSource {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn draw(&self, attempt: u64) -> DVector<f64> {
        self.model
            .sample_one(&self.stream.index(attempt))
            .expect("Gaussian source uses a factorizable model")
    }
}

/// Serves the members of a fixed ensemble in order, wrapping around when
/// attempts exceed the ensemble size (replacement draws after failures).
pub struct EnsembleSource {
    ensemble: SampleEnsemble,
}

impl EnsembleSource {
    pub fn new(ensemble: SampleEnsemble) -> Self {
        EnsembleSource { ensemble }
    }
}

impl ParameterSource for EnsembleSource {
    fn dim(&self) -> usize {
        self.ensemble.dim()
    }

    fn draw(&self, attempt: u64) -> DVector<f64> {
        let n = self.ensemble.count() as u64;
        self.ensemble.samples()[(attempt % n) as usize].clone()
    }
}

/// Inverse standard-normal CDF (Acklam's rational approximation, ~1e-9
/// absolute accuracy). Used for QQ-plot reference quantiles.
pub fn standard_normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must be in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -standard_normal_quantile(1.0 - p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model(mean: Vec<f64>, cov: Vec<f64>) -> GaussianModel {
        let d = mean.len();
        GaussianModel::new(
            DVector::from_vec(mean),
            DMatrix::from_row_slice(d, d, &cov),
            JitterPolicy::Escalate,
        )
        .unwrap()
    }

    #[test]
    fn logpdf_at_mean_of_identity() {
        for d in [1usize, 3, 7] {
            let m = GaussianModel::standard(d);
            let v = m.log_density(m.mean()).unwrap();
            assert_relative_eq!(v, -(d as f64 / 2.0) * LN_2PI, epsilon = 1e-12);
        }
    }

    #[test]
    fn logpdf_standard_normal_at_one() {
        let m = model(vec![0.0], vec![1.0]);
        let v = m.log_density(&DVector::from_vec(vec![1.0])).unwrap();
        assert_relative_eq!(v, -0.5 - 0.5 * LN_2PI, epsilon = 1e-12);
        assert_relative_eq!(v, -1.4189385332046727, epsilon = 1e-7);
    }

    #[test]
    fn logpdf_matches_explicit_inverse_2x2() {
        // Brute-force oracle: explicit 2x2 inverse and determinant.
        let cov = [2.0f64, 1.0, 1.0, 2.0];
        let det = cov[0] * cov[3] - cov[1] * cov[2];
        let inv = [cov[3] / det, -cov[1] / det, -cov[2] / det, cov[0] / det];
        let x = [1.0, 1.0];
        let quad = x[0] * (inv[0] * x[0] + inv[1] * x[1]) + x[1] * (inv[2] * x[0] + inv[3] * x[1]);
        let expected = -0.5 * quad - 0.5 * (det.ln() + 2.0 * LN_2PI);

        let m = model(vec![0.0, 0.0], cov.to_vec());
        let v = m.log_density(&DVector::from_vec(x.to_vec())).unwrap();
        assert_relative_eq!(v, expected, epsilon = 1e-12);
    }

    #[test]
    fn logpdf_dimension_mismatch() {
        let m = GaussianModel::standard(2);
        assert!(matches!(
            m.log_density(&DVector::zeros(3)),
            Err(ProbabilityError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn logpdf_permutation_invariant() {
        let m = model(
            vec![0.3, -1.0, 2.0],
            vec![2.0, 0.5, 0.1, 0.5, 1.5, -0.2, 0.1, -0.2, 1.0],
        );
        let x = DVector::from_vec(vec![1.0, 0.2, -0.7]);
        let base = m.log_density(&x).unwrap();

        // Permutation (2, 0, 1).
        let perm = [2usize, 0, 1];
        let pm = DVector::from_fn(3, |i, _| m.mean()[perm[i]]);
        let pc = DMatrix::from_fn(3, 3, |i, j| m.covariance()[(perm[i], perm[j])]);
        let px = DVector::from_fn(3, |i, _| x[perm[i]]);
        let permuted = GaussianModel::new(pm, pc, JitterPolicy::Escalate).unwrap();
        assert_relative_eq!(permuted.log_density(&px).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn logpdf_block_diagonal_sums() {
        let a = model(vec![0.5, -0.5], vec![1.5, 0.4, 0.4, 2.0]);
        let b = model(vec![2.0], vec![0.7]);
        let mut cov = DMatrix::zeros(3, 3);
        cov.view_mut((0, 0), (2, 2)).copy_from(a.covariance());
        cov[(2, 2)] = 0.7;
        let joint = GaussianModel::new(
            DVector::from_vec(vec![0.5, -0.5, 2.0]),
            cov,
            JitterPolicy::Escalate,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.1, 0.2, 1.0]);
        let sum = a
            .log_density(&DVector::from_vec(vec![0.1, 0.2]))
            .unwrap()
            + b.log_density(&DVector::from_vec(vec![1.0])).unwrap();
        assert_relative_eq!(joint.log_density(&x).unwrap(), sum, epsilon = 1e-10);
    }

    #[test]
    fn moments_two_point_formula() {
        let ensemble = SampleEnsemble::new(vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![3.0, 4.0]),
        ])
        .unwrap();
        let (mean, cov) = estimate_moments(&ensemble).unwrap();
        assert_eq!(mean, DVector::from_vec(vec![2.0, 3.0]));
        assert_eq!(cov, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
    }

    #[test]
    fn moments_identical_samples_zero_covariance() {
        let s = DVector::from_vec(vec![0.5, -1.5, 3.0]);
        let ensemble = SampleEnsemble::new(vec![s.clone(); 6]).unwrap();
        let (mean, cov) = estimate_moments(&ensemble).unwrap();
        assert_eq!(mean, s);
        assert_eq!(cov, DMatrix::zeros(3, 3));
    }

    #[test]
    fn moments_insufficient_samples() {
        let ensemble = SampleEnsemble::new(vec![DVector::zeros(2)]).unwrap();
        assert!(matches!(
            estimate_moments(&ensemble),
            Err(ProbabilityError::InsufficientSamples { got: 1 })
        ));
    }

    #[test]
    fn moments_recover_generator() {
        let m = GaussianModel::standard(2);
        let ensemble = m.sample(1000, &SeedStream::root(11).child("mc")).unwrap();
        let (mean, cov) = estimate_moments(&ensemble).unwrap();
        for i in 0..2 {
            assert!(mean[i].abs() < 0.1, "mean {} drifted: {}", i, mean[i]);
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (cov[(i, j)] - target).abs() < 0.15,
                    "cov ({},{}) = {}",
                    i,
                    j,
                    cov[(i, j)]
                );
            }
        }
    }

    #[test]
    fn moments_recovery_within_5_sigma_bands() {
        // estimate_moments o sample recovers (mu, Sigma) at the Monte Carlo
        // rate; n = 1e4 with 5-sigma bands.
        let n = 10_000usize;
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, 0.2, 0.6, 1.0, -0.3, 0.2, -0.3, 1.5]);
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let m = GaussianModel::new(mean.clone(), cov.clone(), JitterPolicy::Escalate).unwrap();
        let ensemble = m.sample(n, &SeedStream::root(99).child("bands")).unwrap();
        let (est_mean, est_cov) = estimate_moments(&ensemble).unwrap();
        let nf = n as f64;
        for i in 0..3 {
            let se = (cov[(i, i)] / nf).sqrt();
            assert!(
                (est_mean[i] - mean[i]).abs() < 5.0 * se,
                "mean coord {i} outside 5 sigma"
            );
            for j in 0..3 {
                let se_cov = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / nf).sqrt();
                assert!(
                    (est_cov[(i, j)] - cov[(i, j)]).abs() < 5.0 * se_cov,
                    "cov entry ({i},{j}) outside 5 sigma"
                );
            }
        }
    }

    #[test]
    fn moments_covariance_psd_up_to_roundoff() {
        let m = model(
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.9, 0.8, 0.9, 1.0, 0.9, 0.8, 0.9, 1.0],
        );
        let ensemble = m.sample(50, &SeedStream::root(5).child("psd")).unwrap();
        let (_, cov) = estimate_moments(&ensemble).unwrap();
        assert_eq!(cov, cov.transpose());
        let eigs = linalg::symmetric_eigenvalues(&cov);
        let largest = eigs.last().copied().unwrap();
        assert!(eigs[0] >= -1e-8 * largest);
    }

    #[test]
    fn factorize_identity_no_jitter() {
        let f = factorize(&DMatrix::identity(3, 3), JitterPolicy::Escalate).unwrap();
        assert_eq!(f.jitter_used, 0.0);
        assert_relative_eq!(f.lower, DMatrix::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn factorize_zero_matrix_takes_first_ladder_jitter() {
        let f = factorize(&DMatrix::zeros(2, 2), JitterPolicy::Escalate).unwrap();
        // trace is zero, so the ladder runs on the absolute scale 1.
        assert_relative_eq!(f.jitter_used, 1e-12, epsilon = 1e-20);
        let expected = DMatrix::identity(2, 2) * f.jitter_used.sqrt();
        assert_relative_eq!(f.lower, expected, epsilon = 1e-18);
    }

    #[test]
    fn factorize_random_spd_reconstructs() {
        let mut rng = SeedStream::root(3).child("spd").rng();
        let a = DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let spd = &a * a.transpose() + DMatrix::identity(5, 5) * 0.5;
        let f = factorize(&spd, JitterPolicy::Escalate).unwrap();
        let rebuilt = &f.lower * f.lower.transpose()
            - DMatrix::identity(5, 5) * f.jitter_used;
        let err = (&rebuilt - &spd).norm();
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn factorize_rejects_non_square() {
        let m = DMatrix::zeros(2, 3);
        assert!(matches!(
            factorize(&m, JitterPolicy::Escalate),
            Err(ProbabilityError::NotSquare { .. })
        ));
    }

    #[test]
    fn factorize_exhausts_ladder_on_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            factorize(&m, JitterPolicy::Escalate),
            Err(ProbabilityError::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn sample_zero_covariance_returns_mean() {
        let mean = DVector::from_vec(vec![2.0, -1.0]);
        let m = GaussianModel::new(mean.clone(), DMatrix::zeros(2, 2), JitterPolicy::Disabled)
            .unwrap();
        let ensemble = m.sample(5, &SeedStream::root(1).child("degenerate")).unwrap();
        for s in ensemble.iter() {
            assert_eq!(s, &mean);
        }
    }

    #[test]
    fn sample_scalar_moments() {
        let m = GaussianModel::standard(1);
        let n = 100_000;
        let ensemble = m.sample(n, &SeedStream::root(17).child("scalar")).unwrap();
        let mean: f64 = ensemble.iter().map(|s| s[0]).sum::<f64>() / n as f64;
        let var: f64 =
            ensemble.iter().map(|s| (s[0] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn sample_deterministic_per_stream() {
        let m = model(vec![1.0, 2.0], vec![2.0, 0.3, 0.3, 1.0]);
        let stream = SeedStream::root(123).child("repeat");
        let a = m.sample(10, &stream).unwrap();
        let b = m.sample(10, &stream).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normal_quantile_sane() {
        assert_relative_eq!(standard_normal_quantile(0.5), 0.0, epsilon = 1e-9);
        assert_relative_eq!(
            standard_normal_quantile(0.975),
            1.959963984540054,
            epsilon = 1e-7
        );
        assert_relative_eq!(
            standard_normal_quantile(0.025),
            -1.959963984540054,
            epsilon = 1e-7
        );
    }
}

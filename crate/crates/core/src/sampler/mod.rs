//! Affine-invariant ensemble MCMC: the stretch move, parallel half-ensemble
//! sweeps, chain storage, multi-ensemble combination and subsampling.
//!
//! Each step updates the walker ensemble in two half-sweeps: every walker in
//! one half proposes against a uniformly chosen walker of the other half,
//! then the roles swap. Log-posterior evaluations within a half-sweep are
//! independent and run on the rayon pool; every walker owns its own RNG
//! substream, so chains are bit-identical for a given seed regardless of the
//! worker count.

mod diagnostics;

pub use diagnostics::{diagnostics, ChainDiagnostics};

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probability::{ParameterSource, SampleEnsemble};
use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("number of walkers must be even, got {0}")]
    WalkersNotEven(usize),
    #[error("need at least 2 d = {min} walkers for dimension {d}, got {walkers}")]
    TooFewWalkers { walkers: usize, d: usize, min: usize },
    #[error("stretch parameter must exceed 1, got {0}")]
    BadStretchParameter(f64),
    #[error("number of retained steps must be positive")]
    NoSteps,
    #[error(
        "walker {walker} found no finite-log-posterior distinct start after {attempts} attempts"
    )]
    InitializationFailed { walker: usize, attempts: usize },
    #[error("diagnostics need at least {min} post-burn-in steps, got {steps}")]
    TooShortForDiagnostics { steps: usize, min: usize },
    #[error("chains disagree in dimension: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("chains disagree in retained step count: {a} vs {b}")]
    StepCountMismatch { a: usize, b: usize },
    #[error("no chains to combine")]
    NothingToCombine,
    #[error("requested {q} subsamples from a chain of {available}")]
    SubsampleTooLarge { q: usize, available: usize },
    #[error("chain storage is inconsistent: {0}")]
    MalformedChain(String),
}

/// Sampler settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_walkers: usize,
    /// retained (post-burn-in) steps
    pub n_steps: usize,
    /// discarded leading steps
    pub burn_in: usize,
    /// stretch scale, must be > 1
    pub stretch_a: f64,
    pub seed: u64,
    /// keep every `thin`-th retained step (1 = keep all)
    pub thin: usize,
}

impl SamplerConfig {
    pub fn new(n_walkers: usize, n_steps: usize, burn_in: usize, seed: u64) -> Self {
        SamplerConfig {
            n_walkers,
            n_steps,
            burn_in,
            stretch_a: 2.0,
            seed,
            thin: 1,
        }
    }

    fn validate(&self, d: usize) -> Result<(), SamplerError> {
        if self.n_walkers % 2 != 0 {
            return Err(SamplerError::WalkersNotEven(self.n_walkers));
        }
        if self.n_walkers < 2 * d {
            return Err(SamplerError::TooFewWalkers {
                walkers: self.n_walkers,
                d,
                min: 2 * d,
            });
        }
        if !(self.stretch_a > 1.0) {
            return Err(SamplerError::BadStretchParameter(self.stretch_a));
        }
        if self.n_steps == 0 || self.thin == 0 {
            return Err(SamplerError::NoSteps);
        }
        Ok(())
    }
}

/// Stretch scale drawn from density proportional to `1/sqrt(z)` on `[1/a, a]`
/// by inverse CDF: `z = ((a-1) u + 1)^2 / a` for uniform `u`.
pub fn stretch_z(a: f64, u: f64) -> f64 {
    ((a - 1.0) * u + 1.0).powi(2) / a
}

/// Stretch-move proposal `Y = X_c + z (X - X_c)` with its Hastings correction
/// `(d - 1) ln z`; deterministic given `u`.
pub fn stretch_move(
    walker: &DVector<f64>,
    complement_walker: &DVector<f64>,
    a: f64,
    u: f64,
) -> (DVector<f64>, f64) {
    let z = stretch_z(a, u);
    let proposal = complement_walker + (walker - complement_walker) * z;
    let d = walker.len();
    let log_hastings = (d as f64 - 1.0) * z.ln();
    (proposal, log_hastings)
}

/// Ordered MCMC sample store: post-burn-in walker states with log-posterior
/// values and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    n_walkers: usize,
    n_steps: usize,
    d: usize,
    /// step-major: index = step * n_walkers + walker
    values: Vec<DVector<f64>>,
    logpost: Vec<f64>,
    accepted: Vec<bool>,
    seed: u64,
    source_seeds: Vec<u64>,
    burn_in_discarded: usize,
    acceptance_rate: f64,
    warnings: Vec<String>,
}

impl Chain {
    /// Assemble a chain from raw parts (used by persistence and tests).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n_walkers: usize,
        n_steps: usize,
        d: usize,
        values: Vec<DVector<f64>>,
        logpost: Vec<f64>,
        accepted: Vec<bool>,
        seed: u64,
        burn_in_discarded: usize,
        acceptance_rate: f64,
    ) -> Result<Self, SamplerError> {
        let expected = n_walkers * n_steps;
        if values.len() != expected || logpost.len() != expected || accepted.len() != expected {
            return Err(SamplerError::MalformedChain(format!(
                "expected {expected} entries, got {} values / {} logpost / {} accepted",
                values.len(),
                logpost.len(),
                accepted.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| v.len() != d) {
            return Err(SamplerError::MalformedChain(format!(
                "sample {bad} has dimension {} instead of {d}",
                values[bad].len()
            )));
        }
        Ok(Chain {
            n_walkers,
            n_steps,
            d,
            values,
            logpost,
            accepted,
            seed,
            source_seeds: vec![seed],
            burn_in_discarded,
            acceptance_rate,
            warnings: Vec::new(),
        })
    }

    pub fn n_walkers(&self) -> usize {
        self.n_walkers
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sample(&self, walker: usize, step: usize) -> &DVector<f64> {
        &self.values[step * self.n_walkers + walker]
    }

    pub fn logpost(&self, walker: usize, step: usize) -> f64 {
        self.logpost[step * self.n_walkers + walker]
    }

    pub fn accepted(&self, walker: usize, step: usize) -> bool {
        self.accepted[step * self.n_walkers + walker]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn source_seeds(&self) -> &[u64] {
        &self.source_seeds
    }

    pub fn burn_in_discarded(&self) -> usize {
        self.burn_in_discarded
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance_rate
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// All retained samples in storage order.
    pub fn flat_samples(&self) -> &[DVector<f64>] {
        &self.values
    }

    /// One coordinate of one walker across retained steps.
    pub fn walker_trace(&self, walker: usize, coord: usize) -> Vec<f64> {
        (0..self.n_steps)
            .map(|s| self.values[s * self.n_walkers + walker][coord])
            .collect()
    }

    /// Marginal mean and standard deviation per coordinate over all samples.
    pub fn marginal_moments(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.values.len() as f64;
        let mut mean = DVector::zeros(self.d);
        for v in &self.values {
            mean += v;
        }
        mean /= n;
        let mut var = DVector::zeros(self.d);
        for v in &self.values {
            for c in 0..self.d {
                var[c] += (v[c] - mean[c]).powi(2);
            }
        }
        var /= n - 1.0;
        (mean, var.map(|v: f64| v.sqrt()))
    }

    /// Sorted values of one coordinate over all samples.
    pub fn sorted_coordinate(&self, coord: usize) -> Vec<f64> {
        let mut values: Vec<f64> = self.values.iter().map(|v| v[coord]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values
    }
}

struct WalkerState {
    position: DVector<f64>,
    logpost: f64,
    rng: rand_chacha::ChaCha8Rng,
    accepted_last: bool,
}

/// Run the ensemble sampler against `logpost`, starting from draws of `init`.
///
/// Walkers with a non-finite starting log posterior are redrawn (up to 100
/// attempts each); the first `burn_in` steps are discarded; each retained
/// step stores every walker state.
pub fn run_ensemble<L>(
    logpost: &L,
    init: &dyn ParameterSource,
    cfg: &SamplerConfig,
) -> Result<Chain, SamplerError>
where
    L: Fn(&DVector<f64>) -> f64 + Sync,
{
    let d = init.dim();
    cfg.validate(d)?;
    let n = cfg.n_walkers;
    let stream = SeedStream::root(cfg.seed).child("ensemble-sampler");

    // Initialization: distinct, finite-log-posterior starting points.
    const MAX_INIT_ATTEMPTS: usize = 100;
    let mut walkers: Vec<WalkerState> = Vec::with_capacity(n);
    let mut taken: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
    for w in 0..n {
        let mut found = None;
        for attempt in 0..MAX_INIT_ATTEMPTS {
            let candidate = init.draw((attempt * n + w) as u64);
            if candidate.len() != d {
                return Err(SamplerError::MalformedChain(format!(
                    "init source produced dimension {} instead of {d}",
                    candidate.len()
                )));
            }
            let key: Vec<u64> = candidate.iter().map(|v| v.to_bits()).collect();
            if taken.contains(&key) {
                continue;
            }
            let lp = logpost(&candidate);
            if lp.is_finite() {
                taken.insert(key);
                found = Some((candidate, lp));
                break;
            }
        }
        let (position, lp) = found.ok_or(SamplerError::InitializationFailed {
            walker: w,
            attempts: MAX_INIT_ATTEMPTS,
        })?;
        walkers.push(WalkerState {
            position,
            logpost: lp,
            rng: stream.child("walker").index(w as u64).rng(),
            accepted_last: false,
        });
    }

    let total_steps = cfg.burn_in + cfg.n_steps;
    let retained = cfg.n_steps.div_ceil(cfg.thin);
    let mut values = Vec::with_capacity(retained * n);
    let mut logpost_store = Vec::with_capacity(retained * n);
    let mut accepted_store = Vec::with_capacity(retained * n);
    let mut accepted_total: u64 = 0;
    let mut warnings = Vec::new();

    const STUCK_WINDOW: usize = 50;
    let mut window_accepts: std::collections::VecDeque<u64> =
        std::collections::VecDeque::with_capacity(STUCK_WINDOW);

    let half = n / 2;
    let mut stored_steps = 0usize;
    for step in 0..total_steps {
        let mut accepted_this_step: u64 = 0;
        // Two half-ensemble sweeps per step.
        for first_half_active in [true, false] {
            let (a_slice, b_slice) = walkers.split_at_mut(half);
            let (active, complement) = if first_half_active {
                (a_slice, &*b_slice)
            } else {
                (b_slice, &*a_slice)
            };
            let complement_positions: Vec<&DVector<f64>> =
                complement.iter().map(|w| &w.position).collect();
            accepted_this_step += active
                .par_iter_mut()
                .map(|walker| {
                    let j = walker.rng.random_range(0..complement_positions.len());
                    let u: f64 = walker.rng.random();
                    let (proposal, log_hastings) =
                        stretch_move(&walker.position, complement_positions[j], cfg.stretch_a, u);
                    let lp_new = logpost(&proposal);
                    let log_ratio = log_hastings + lp_new - walker.logpost;
                    let accept = if log_ratio >= 0.0 {
                        true
                    } else {
                        let v: f64 = walker.rng.random();
                        v.ln() < log_ratio
                    };
                    if accept && lp_new.is_finite() {
                        walker.position = proposal;
                        walker.logpost = lp_new;
                        walker.accepted_last = true;
                        1u64
                    } else {
                        walker.accepted_last = false;
                        0u64
                    }
                })
                .sum::<u64>();
        }
        accepted_total += accepted_this_step;

        if window_accepts.len() == STUCK_WINDOW {
            window_accepts.pop_front();
        }
        window_accepts.push_back(accepted_this_step);
        if window_accepts.len() == STUCK_WINDOW && warnings.is_empty() {
            let window_total: u64 = window_accepts.iter().sum();
            let rate = window_total as f64 / (STUCK_WINDOW * n) as f64;
            if rate < 0.01 {
                warnings.push(format!(
                    "acceptance rate {:.4} over steps {}..{} — walkers appear stuck",
                    rate,
                    step + 1 - STUCK_WINDOW,
                    step
                ));
            }
        }

        if step >= cfg.burn_in && (step - cfg.burn_in) % cfg.thin == 0 {
            for walker in &walkers {
                values.push(walker.position.clone());
                logpost_store.push(walker.logpost);
                accepted_store.push(walker.accepted_last);
            }
            stored_steps += 1;
        }
    }

    let acceptance_rate = accepted_total as f64 / (total_steps * n) as f64;
    let mut chain = Chain::from_parts(
        n,
        stored_steps,
        d,
        values,
        logpost_store,
        accepted_store,
        cfg.seed,
        cfg.burn_in * n,
        acceptance_rate,
    )?;
    chain.warnings = warnings;
    Ok(chain)
}

/// Concatenate independently run ensembles (equal dimensions and step
/// counts) into one chain; walker blocks are stacked and every source seed
/// is recorded.
pub fn combine_ensembles(chains: &[Chain]) -> Result<Chain, SamplerError> {
    let first = chains.first().ok_or(SamplerError::NothingToCombine)?;
    for c in chains.iter().skip(1) {
        if c.d != first.d {
            return Err(SamplerError::DimensionMismatch { a: first.d, b: c.d });
        }
        if c.n_steps != first.n_steps {
            return Err(SamplerError::StepCountMismatch {
                a: first.n_steps,
                b: c.n_steps,
            });
        }
    }
    let n_walkers: usize = chains.iter().map(|c| c.n_walkers).sum();
    let n_steps = first.n_steps;
    let mut values = Vec::with_capacity(n_walkers * n_steps);
    let mut logpost = Vec::with_capacity(n_walkers * n_steps);
    let mut accepted = Vec::with_capacity(n_walkers * n_steps);
    for step in 0..n_steps {
        for c in chains {
            for w in 0..c.n_walkers {
                let idx = step * c.n_walkers + w;
                values.push(c.values[idx].clone());
                logpost.push(c.logpost[idx]);
                accepted.push(c.accepted[idx]);
            }
        }
    }
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let acceptance_rate = chains
        .iter()
        .map(|c| c.acceptance_rate * c.len() as f64)
        .sum::<f64>()
        / total as f64;
    let mut combined = Chain::from_parts(
        n_walkers,
        n_steps,
        first.d,
        values,
        logpost,
        accepted,
        first.seed,
        chains.iter().map(|c| c.burn_in_discarded).sum(),
        acceptance_rate,
    )?;
    combined.source_seeds = chains.iter().flat_map(|c| c.source_seeds.clone()).collect();
    combined.warnings = chains.iter().flat_map(|c| c.warnings.clone()).collect();
    Ok(combined)
}

/// Uniform subsample without replacement, deterministic in the stream.
pub fn subsample(
    chain: &Chain,
    q: usize,
    stream: &SeedStream,
) -> Result<SampleEnsemble, SamplerError> {
    let total = chain.len();
    if q > total {
        return Err(SamplerError::SubsampleTooLarge {
            q,
            available: total,
        });
    }
    if q == 0 {
        return Err(SamplerError::NoSteps);
    }
    let mut rng = stream.rng();
    let mut indices: Vec<usize> = (0..total).collect();
    // Partial Fisher-Yates: only the first q positions are needed.
    for i in 0..q {
        let j = rng.random_range(i..total);
        indices.swap(i, j);
    }
    let samples: Vec<DVector<f64>> = indices[..q]
        .iter()
        .map(|&i| chain.values[i].clone())
        .collect();
    SampleEnsemble::new(samples).map_err(|e| SamplerError::MalformedChain(e.to_string()))
}

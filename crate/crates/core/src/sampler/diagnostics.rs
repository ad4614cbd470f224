//! Chain convergence diagnostics: acceptance rate, integrated
//! autocorrelation time and split-R-hat, all advisory.

use serde::Serialize;

use super::{Chain, SamplerError};

const MIN_STEPS: usize = 100;
/// Sokal window constant: the autocorrelation sum is truncated at the first
/// lag M with M >= C_WINDOW * tau(M).
const C_WINDOW: f64 = 5.0;

#[derive(Debug, Clone, Serialize)]
pub struct ChainDiagnostics {
    pub acceptance_rate: f64,
    /// per coordinate, in units of steps
    pub autocorrelation_time: Vec<f64>,
    /// per coordinate
    pub split_rhat: Vec<f64>,
    pub n_samples: usize,
}

/// Standard estimators over one or more chains of equal dimension.
///
/// The autocorrelation function is averaged over all walkers (each with its
/// own mean removed) and integrated under an automatic Sokal window; R-hat
/// splits every walker trace in half and applies the usual
/// between/within-variance formula.
pub fn diagnostics(chains: &[&Chain]) -> Result<ChainDiagnostics, SamplerError> {
    let first = chains.first().ok_or(SamplerError::NothingToCombine)?;
    let d = first.dim();
    for c in chains {
        if c.dim() != d {
            return Err(SamplerError::DimensionMismatch {
                a: d,
                b: c.dim(),
            });
        }
        if c.n_steps() < MIN_STEPS {
            return Err(SamplerError::TooShortForDiagnostics {
                steps: c.n_steps(),
                min: MIN_STEPS,
            });
        }
    }

    let mut autocorrelation_time = Vec::with_capacity(d);
    let mut split_rhat = Vec::with_capacity(d);
    for coord in 0..d {
        let mut traces: Vec<Vec<f64>> = Vec::new();
        for c in chains {
            for w in 0..c.n_walkers() {
                traces.push(c.walker_trace(w, coord));
            }
        }
        autocorrelation_time.push(integrated_autocorrelation_time(&traces));
        split_rhat.push(split_rhat_from_traces(&traces));
    }

    let total: usize = chains.iter().map(|c| c.len()).sum();
    let acceptance_rate = chains
        .iter()
        .map(|c| c.acceptance_rate() * c.len() as f64)
        .sum::<f64>()
        / total as f64;
    Ok(ChainDiagnostics {
        acceptance_rate,
        autocorrelation_time,
        split_rhat,
        n_samples: total,
    })
}

/// Integrated autocorrelation time of a set of equal-length traces.
pub fn integrated_autocorrelation_time(traces: &[Vec<f64>]) -> f64 {
    let n = traces[0].len();
    let centered: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            let mean = t.iter().sum::<f64>() / n as f64;
            t.iter().map(|v| v - mean).collect()
        })
        .collect();
    let c0: f64 = centered
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>() / n as f64)
        .sum::<f64>()
        / traces.len() as f64;
    if c0 <= 0.0 {
        return 1.0;
    }
    let max_lag = n / 2;
    let mut tau = 1.0;
    for lag in 1..max_lag {
        let c_lag: f64 = centered
            .iter()
            .map(|t| {
                (0..n - lag).map(|i| t[i] * t[i + lag]).sum::<f64>() / (n - lag) as f64
            })
            .sum::<f64>()
            / traces.len() as f64;
        tau += 2.0 * c_lag / c0;
        if (lag as f64) >= C_WINDOW * tau {
            break;
        }
    }
    tau.max(0.0)
}

/// Split-R-hat over walker traces: each trace is halved, then the classic
/// between/within variance ratio is applied to the split set.
pub fn split_rhat_from_traces(traces: &[Vec<f64>]) -> f64 {
    let mut sequences: Vec<&[f64]> = Vec::with_capacity(2 * traces.len());
    for t in traces {
        let half = t.len() / 2;
        sequences.push(&t[..half]);
        // Odd lengths drop the middle element.
        sequences.push(&t[t.len() - half..]);
    }
    let m = sequences.len() as f64;
    let len = sequences[0].len() as f64;
    let means: Vec<f64> = sequences
        .iter()
        .map(|s| s.iter().sum::<f64>() / len)
        .collect();
    let variances: Vec<f64> = sequences
        .iter()
        .zip(&means)
        .map(|(s, mean)| s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (len - 1.0))
        .collect();
    let grand_mean = means.iter().sum::<f64>() / m;
    let between = len / (m - 1.0)
        * means
            .iter()
            .map(|mu| (mu - grand_mean).powi(2))
            .sum::<f64>();
    let within = variances.iter().sum::<f64>() / m;
    if within <= 0.0 {
        return 1.0;
    }
    (((len - 1.0) / len * within + between / len) / within).sqrt()
}

//! Stage implementations: synthesize, naive, errors, bae, predict, oracle,
//! report.
//!
//! Each stage runs inside a worker pool sized by the config, derives its own
//! seed from the root seed by label, writes its artifacts under a dedicated
//! subdirectory, and records checksums in the run manifest. Completed stages
//! are skipped when rerun with an unchanged config hash and refuse to run
//! when the hash differs.

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use bae_core::bae::{
    build_error_ensemble, error_statistics, normality_diagnostics, total_error_model,
    ErrorSource, ErrorStatistics, FailurePolicy,
};
use bae_core::forward::{
    ExternalModel, ExternalModelSpec, ForwardModel, LinearModel, SliceConfig, SliceModel,
};
use bae_core::oracle::{analytic_posteriors, map_estimate, LinearProblem, NuForm, PosteriorVariant};
use bae_core::posterior::{
    feasibility_summary, posterior_predictive, synthesize_data, FeasibilityReport,
    InverseProblem, PriorSpec, DEFAULT_FEASIBILITY_LEVELS, DEFAULT_PREDICTIVE_LEVELS,
};
use bae_core::probability::{
    EnsembleSource, GaussianModel, JitterPolicy, ParameterSource,
};
use bae_core::rng::{derive_seed, SeedStream};
use bae_core::sampler::{
    combine_ensembles, diagnostics, run_ensemble, subsample, Chain, SamplerConfig,
};

use crate::config::{
    BaeSourceKind, FailurePolicyKind, ModelKind, NoiseKind, NuFormKind, PipelineConfig, PriorKind,
};
use crate::io::{
    read_chain_csv, read_json, read_matrix_csv, read_row_csv, read_vector_csv, write_chain_csv,
    write_json, write_matrix_csv, write_row_csv, write_vector_csv, ChainMeta,
};
use crate::manifest::{
    checksum_outputs, now_unix_ms, RunManifest, StageDisposition, StageRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Naive,
    Bae,
}

impl Which {
    fn dir(&self) -> &'static str {
        match self {
            Which::Naive => "naive",
            Which::Bae => "bae",
        }
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    hash: String,
    pool: rayon::ThreadPool,
}

/// Collects the files a stage produced, for checksumming.
struct StageFiles {
    files: Vec<(String, bool)>,
    model_failures: u64,
}

impl StageFiles {
    fn add(&mut self, relative: impl Into<String>) {
        self.files.push((relative.into(), false));
    }

    fn add_volatile(&mut self, relative: impl Into<String>) {
        self.files.push((relative.into(), true));
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.run.output.clone();
        let hash = cfg.config_hash();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.workers)
            .build()
            .context("building worker pool")?;
        Ok(Pipeline {
            cfg,
            out,
            hash,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn output_dir(&self) -> &PathBuf {
        &self.out
    }

    fn stage_seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.run.seed, label)
    }

    /// Run `body` as stage `name` unless it already completed under this
    /// config hash.
    fn run_stage<F>(&self, name: &str, deps: &[&str], body: F) -> Result<StageOutcome>
    where
        F: FnOnce(&mut StageFiles) -> Result<()> + Send,
    {
        let mut manifest =
            RunManifest::load_or_new(&self.out, &self.hash, self.cfg.run.seed)?;
        for dep in deps {
            manifest.require_stage(dep, name)?;
        }
        match manifest.stage_disposition(name, &self.hash)? {
            StageDisposition::Skip => {
                println!("stage {name}: up to date under config {} - skipped", &self.hash[..12]);
                return Ok(StageOutcome::Skipped);
            }
            StageDisposition::Run => {}
        }
        std::fs::create_dir_all(self.out.join(name))
            .with_context(|| format!("creating stage directory {name}"))?;

        let started = now_unix_ms();
        let clock = Instant::now();
        let mut files = StageFiles {
            files: Vec::new(),
            model_failures: 0,
        };
        self.pool.install(|| body(&mut files))?;
        let wall = clock.elapsed().as_secs_f64();

        let records = checksum_outputs(&self.out, &files.files)?;
        manifest.record_stage(
            name,
            StageRecord {
                config_hash: self.hash.clone(),
                seed: self.stage_seed(name),
                started_unix_ms: started,
                finished_unix_ms: now_unix_ms(),
                wall_clock_s: wall,
                files: records,
                model_failures: files.model_failures,
            },
        );
        manifest.write(&self.out)?;
        println!("stage {name}: completed in {wall:.2} s");
        Ok(StageOutcome::Ran)
    }

    // ---- model / problem assembly ---------------------------------------

    /// (fine, coarse) forward models per the config.
    pub fn build_models(&self) -> Result<(Arc<dyn ForwardModel>, Arc<dyn ForwardModel>)> {
        match self.cfg.model.kind {
            ModelKind::Polynomial => {
                let section = self.cfg.model.polynomial.as_ref().unwrap();
                let t = bae_core::forward::polynomial::equally_spaced(
                    section.t_min,
                    section.t_max,
                    section.n_points,
                );
                let fine_matrix =
                    bae_core::forward::polynomial::poly_design_matrix(&t, section.fine_order)?;
                let coarse_matrix = if section.coarse_order == section.fine_order {
                    fine_matrix.clone()
                } else {
                    bae_core::forward::polynomial::coarse_projection(
                        &fine_matrix,
                        section.coarse_order,
                    )?
                };
                Ok((
                    Arc::new(LinearModel::new(fine_matrix)),
                    Arc::new(LinearModel::new(coarse_matrix)),
                ))
            }
            ModelKind::Slice => {
                let section = self.cfg.model.slice.as_ref().unwrap();
                let build = |nx: usize, nz: usize| -> Result<SliceConfig> {
                    let mut slice = SliceConfig::with_grid(nx, nz)?;
                    if let Some(v) = section.top_temperature {
                        slice.top_temperature = v;
                    }
                    if let Some(v) = section.basal_heat_flux {
                        slice.basal_heat_flux = v;
                    }
                    if let Some(v) = section.source_mass_flux {
                        slice.source_mass_flux = v;
                    }
                    if let Some(v) = section.source_enthalpy {
                        slice.source_enthalpy = v;
                    }
                    if let Some(v) = section.thermal_conductivity {
                        slice.thermal_conductivity = v;
                    }
                    if let Some(v) = section.porosity {
                        slice.porosity = v;
                    }
                    Ok(slice)
                };
                Ok((
                    Arc::new(SliceModel::new(build(section.fine_nx, section.fine_nz)?)),
                    Arc::new(SliceModel::new(build(
                        section.coarse_nx,
                        section.coarse_nz,
                    )?)),
                ))
            }
            ModelKind::External => {
                let section = self.cfg.model.external.as_ref().unwrap();
                let connect = |endpoint: &crate::config::ExternalEndpoint| -> Result<ExternalModel> {
                    ExternalModel::connect(ExternalModelSpec {
                        command: endpoint.command.clone(),
                        args: endpoint.args.clone(),
                        timeout_s: endpoint.timeout_s,
                        pool_size: self.cfg.run.workers,
                    })
                    .map_err(|e| anyhow!("connecting external model: {e}"))
                };
                Ok((
                    Arc::new(connect(&section.fine)?),
                    Arc::new(connect(&section.coarse)?),
                ))
            }
        }
    }

    pub fn prior(&self, input_dim: usize) -> Result<PriorSpec> {
        let broadcast = |values: &[f64], what: &str| -> Result<DVector<f64>> {
            if values.len() == input_dim {
                Ok(DVector::from_vec(values.to_vec()))
            } else if values.len() == 1 {
                Ok(DVector::from_element(input_dim, values[0]))
            } else {
                bail!(
                    "prior {what} has length {}, expected {input_dim} (or 1 to broadcast)",
                    values.len()
                )
            }
        };
        match self.cfg.prior.kind {
            PriorKind::UniformBox => {
                let lower = broadcast(self.cfg.prior.lower.as_ref().unwrap(), "lower")?;
                let upper = broadcast(self.cfg.prior.upper.as_ref().unwrap(), "upper")?;
                Ok(PriorSpec::uniform_box(lower, upper)?)
            }
            PriorKind::Gaussian => {
                let mean = broadcast(self.cfg.prior.mean.as_ref().unwrap(), "mean")?;
                let cov = if let Some(rows) = &self.cfg.prior.cov_rows {
                    if rows.len() != input_dim || rows.iter().any(|r| r.len() != input_dim) {
                        bail!("prior cov_rows must be {input_dim}x{input_dim}");
                    }
                    DMatrix::from_fn(input_dim, input_dim, |i, j| rows[i][j])
                } else {
                    let sd = self.cfg.prior.sd.unwrap();
                    DMatrix::identity(input_dim, input_dim) * (sd * sd)
                };
                Ok(PriorSpec::Gaussian(GaussianModel::new(
                    mean,
                    cov,
                    JitterPolicy::Escalate,
                )?))
            }
        }
    }

    pub fn noise(&self, output_dim: usize) -> Result<GaussianModel> {
        let cov = match self.cfg.noise.kind {
            NoiseKind::Iid => {
                let sd = self.cfg.noise.sd.unwrap();
                DMatrix::identity(output_dim, output_dim) * (sd * sd)
            }
            NoiseKind::Multilevel => bae_core::oracle::multilevel_noise_cov(
                output_dim,
                self.cfg.noise.blocks.as_ref().unwrap(),
                self.cfg.noise.sd.unwrap(),
                self.cfg.noise.mixing.unwrap(),
            )?,
            NoiseKind::File => {
                let path = self.cfg.noise.cov_file.as_ref().unwrap();
                let matrix = read_matrix_csv(path)?;
                if matrix.nrows() != output_dim || matrix.ncols() != output_dim {
                    bail!(
                        "noise covariance file is {}x{}, expected {output_dim}x{output_dim}",
                        matrix.nrows(),
                        matrix.ncols()
                    );
                }
                matrix
            }
        };
        let mean = match &self.cfg.noise.mean {
            None => DVector::zeros(output_dim),
            Some(values) if values.len() == output_dim => DVector::from_vec(values.clone()),
            Some(values) if values.len() == 1 => DVector::from_element(output_dim, values[0]),
            Some(values) => bail!(
                "noise mean has length {}, expected {output_dim}",
                values.len()
            ),
        };
        Ok(GaussianModel::new(mean, cov, JitterPolicy::Escalate)?)
    }

    /// Observations for inversion: synthesized artifact or configured file.
    pub fn load_y_obs(&self) -> Result<DVector<f64>> {
        if self.cfg.data.synthesize.is_some() {
            let path = self.out.join("synthesize").join("y_obs.csv");
            if !path.exists() {
                bail!("data is configured for synthesis: run the synthesize stage first");
            }
            Ok(read_vector_csv(&path)?)
        } else {
            let path = self.cfg.data.y_obs.as_ref().unwrap();
            if !path.exists() {
                bail!("observation file {} does not exist", path.display());
            }
            Ok(read_vector_csv(path)?)
        }
    }

    pub fn truth(&self) -> Option<DVector<f64>> {
        self.cfg
            .data
            .synthesize
            .as_ref()
            .map(|s| DVector::from_vec(s.truth.clone()))
    }

    // ---- stages ----------------------------------------------------------

    pub fn cmd_synthesize(&self) -> Result<StageOutcome> {
        let synth = self
            .cfg
            .data
            .synthesize
            .as_ref()
            .ok_or_else(|| anyhow!("[data.synthesize] is not configured"))?
            .clone();
        self.run_stage("synthesize", &[], |files| {
            let (fine, _) = self.build_models()?;
            if synth.truth.len() != fine.input_dim() {
                bail!(
                    "truth has length {}, model expects {}",
                    synth.truth.len(),
                    fine.input_dim()
                );
            }
            let noise = self.noise(fine.output_dim())?;
            let truth = DVector::from_vec(synth.truth.clone());
            let seed = self.stage_seed("synthesize");
            let data = synthesize_data(
                &truth,
                fine.as_ref(),
                &noise,
                &SeedStream::root(seed).child("noise-draw"),
            )?;
            let dir = self.out.join("synthesize");
            write_vector_csv(&dir.join("y_obs.csv"), &data.y_obs)?;
            write_vector_csv(&dir.join("y_clean.csv"), &data.y_clean)?;
            write_json(
                &dir.join("truth.json"),
                &serde_json::json!({
                    "truth": synth.truth,
                    "seed": seed,
                    "config_hash": self.hash,
                }),
            )?;
            files.add("synthesize/y_obs.csv");
            files.add("synthesize/y_clean.csv");
            files.add("synthesize/truth.json");
            Ok(())
        })
    }

    fn run_mcmc_stage(&self, which: Which, deps: &[&str]) -> Result<StageOutcome> {
        let name = which.dir();
        self.run_stage(name, deps, |files| {
            let (fine, coarse) = self.build_models()?;
            let _ = &fine;
            let y_obs = self.load_y_obs()?;
            let prior = self.prior(coarse.input_dim())?;
            let noise = self.noise(coarse.output_dim())?;
            let mut problem =
                InverseProblem::new(coarse.clone(), prior.clone(), noise.clone(), y_obs)?;
            if which == Which::Bae {
                let stats = self.load_error_statistics()?;
                let total = total_error_model(&noise, &stats)?;
                problem = problem.with_total_error(total)?;
            }

            let evaluator: Box<dyn Fn(&DVector<f64>) -> f64 + Sync> = match which {
                Which::Naive => Box::new(problem.naive_evaluator()),
                Which::Bae => Box::new(problem.bae_evaluator()?),
            };
            let dir = self.out.join(name);
            let mut chains = Vec::new();
            let mut seeds = Vec::new();
            let mut acceptance_rates = Vec::new();
            let mut warnings = Vec::new();
            for e in 0..self.cfg.mcmc.ensembles {
                let seed = self.stage_seed(&format!("{name}-ensemble-{e}"));
                let sampler_cfg = SamplerConfig {
                    n_walkers: self.cfg.mcmc.walkers,
                    n_steps: self.cfg.mcmc.steps,
                    burn_in: self.cfg.mcmc.burn_in,
                    stretch_a: self.cfg.mcmc.stretch_a,
                    seed,
                    thin: self.cfg.mcmc.thin,
                };
                // Walkers start as a compact cloud around the best of a batch
                // of prior draws. Overdispersed starts leave stragglers in
                // negligible-probability basins that the stretch move cannot
                // rescue, and those stragglers poison every chain statistic.
                let candidates = prior.source(SeedStream::root(seed).child("init-candidates"));
                let n_candidates = 512.max(4 * self.cfg.mcmc.walkers);
                let best = (0..n_candidates)
                    .into_par_iter()
                    .map(|i| {
                        let k = candidates.draw(i as u64);
                        let lp = evaluator(&k);
                        (lp, i as u64)
                    })
                    .reduce(
                        || (f64::NEG_INFINITY, u64::MAX),
                        |a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
                    );
                if !best.0.is_finite() {
                    bail!("no prior draw had a finite log posterior during initialization");
                }
                let init = bae_core::posterior::BallSource::around(
                    candidates.draw(best.1),
                    0.02,
                    &prior,
                    SeedStream::root(seed).child("init-ball"),
                );
                let chain = run_ensemble(&|k: &DVector<f64>| evaluator(k), &init, &sampler_cfg)?;
                let file = format!("{name}/chain_{e:03}.csv");
                write_chain_csv(&dir.join(format!("chain_{e:03}.csv")), &chain)?;
                files.add(file);
                seeds.push(seed);
                acceptance_rates.push(chain.acceptance_rate());
                warnings.extend(chain.warnings().iter().cloned());
                chains.push(chain);
            }

            let combined = combine_ensembles(&chains)?;
            let meta = ChainMeta {
                config_hash: self.hash.clone(),
                seeds,
                n_walkers: self.cfg.mcmc.walkers,
                n_steps: chains[0].n_steps(),
                dim: combined.dim(),
                burn_in_discarded: self.cfg.mcmc.burn_in * self.cfg.mcmc.walkers,
                acceptance_rates,
                model_failures: problem.model_failure_count(),
                warnings,
                ensembles: self.cfg.mcmc.ensembles,
            };
            write_json(&dir.join("chain_meta.json"), &meta)?;
            files.add(format!("{name}/chain_meta.json"));
            files.model_failures = problem.model_failure_count();

            let refs: Vec<&Chain> = chains.iter().collect();
            let diag = diagnostics(&refs)?;
            write_json(&dir.join("diagnostics.json"), &diag)?;
            files.add(format!("{name}/diagnostics.json"));
            Ok(())
        })
    }

    pub fn cmd_naive(&self) -> Result<StageOutcome> {
        let deps: &[&str] = if self.cfg.data.synthesize.is_some() {
            &["synthesize"]
        } else {
            &[]
        };
        self.run_mcmc_stage(Which::Naive, deps)
    }

    pub fn cmd_bae(&self) -> Result<StageOutcome> {
        self.run_mcmc_stage(Which::Bae, &["errors"])
    }

    /// Load the per-ensemble chains of a completed MCMC stage, combined.
    pub fn load_chain(&self, which: Which) -> Result<Chain> {
        let dir = self.out.join(which.dir());
        let meta: ChainMeta = read_json(&dir.join("chain_meta.json"))?;
        let mut chains = Vec::with_capacity(meta.ensembles);
        for e in 0..meta.ensembles {
            let path = dir.join(format!("chain_{e:03}.csv"));
            chains.push(read_chain_csv(&path, &meta, e)?);
        }
        Ok(combine_ensembles(&chains)?)
    }

    pub fn cmd_errors(&self) -> Result<StageOutcome> {
        let deps: &[&str] = match self.cfg.bae.source {
            BaeSourceKind::PosteriorInformed => &["naive"],
            BaeSourceKind::PriorBased => {
                if self.cfg.data.synthesize.is_some() {
                    &["synthesize"]
                } else {
                    &[]
                }
            }
        };
        self.run_stage("errors", deps, |files| {
            let (fine, coarse) = self.build_models()?;
            let q = self.cfg.bae.q;
            let policy = match self.cfg.bae.failure_policy {
                FailurePolicyKind::Replace => FailurePolicy::Replace,
                FailurePolicyKind::Drop => FailurePolicy::Drop,
            };
            let seed = self.stage_seed("errors");
            let (source, tag): (Box<dyn ParameterSource>, ErrorSource) =
                match self.cfg.bae.source {
                    BaeSourceKind::PriorBased => {
                        let prior = self.prior(coarse.input_dim())?;
                        (
                            Box::new(prior.source(SeedStream::root(seed).child("prior-draws"))),
                            ErrorSource::PriorBased,
                        )
                    }
                    BaeSourceKind::PosteriorInformed => {
                        let chain = self.load_chain(Which::Naive)?;
                        // Subsample enough extras to cover the replacement
                        // budget without reusing draws.
                        let want = (3 * q).min(chain.len());
                        let ensemble = subsample(
                            &chain,
                            want,
                            &SeedStream::root(seed).child("subsample"),
                        )?;
                        (
                            Box::new(EnsembleSource::new(ensemble)),
                            ErrorSource::PosteriorInformed,
                        )
                    }
                };
            let build =
                build_error_ensemble(source.as_ref(), fine.as_ref(), coarse.as_ref(), q, policy)?;
            let stats = error_statistics(&build, tag, seed)?;

            let dir = self.out.join("errors");
            write_row_csv(&dir.join("epsilon_mean.csv"), &stats.epsilon_mean)?;
            write_matrix_csv(&dir.join("epsilon_cov.csv"), &stats.epsilon_cov)?;
            files.add("errors/epsilon_mean.csv");
            files.add("errors/epsilon_cov.csv");

            let normality = normality_diagnostics(&build.ensemble).ok();
            if let Some(report) = &normality {
                let mut qq = String::from("component,theoretical,empirical\n");
                for (component, rows) in report.qq.iter().enumerate() {
                    for (theoretical, empirical) in rows {
                        qq.push_str(&format!("{component},{theoretical},{empirical}\n"));
                    }
                }
                std::fs::write(dir.join("qq_data.csv"), qq)?;
                files.add("errors/qq_data.csv");
            }

            #[derive(Serialize)]
            struct ErrorMeta<'a> {
                config_hash: &'a str,
                seed: u64,
                source: ErrorSource,
                q_requested: usize,
                q_succeeded: usize,
                q_failed: usize,
                attempts: u64,
                failures: &'a [bae_core::bae::FailureRecord],
                normality: Option<Vec<bae_core::bae::ComponentDiagnostics>>,
                failure_log: &'a str,
            }
            write_json(
                &dir.join("error_meta.json"),
                &ErrorMeta {
                    config_hash: &self.hash,
                    seed,
                    source: tag,
                    q_requested: stats.q_requested,
                    q_succeeded: stats.q_succeeded,
                    q_failed: stats.q_failed,
                    attempts: build.attempts,
                    failures: &build.failures,
                    normality: normality.map(|n| n.components),
                    failure_log: "error_meta.json#failures",
                },
            )?;
            files.add("errors/error_meta.json");
            Ok(())
        })
    }

    /// Reload persisted error statistics.
    pub fn load_error_statistics(&self) -> Result<ErrorStatistics> {
        let dir = self.out.join("errors");
        let mean = read_row_csv(&dir.join("epsilon_mean.csv"))?;
        let cov = read_matrix_csv(&dir.join("epsilon_cov.csv"))?;
        let meta: serde_json::Value = read_json(&dir.join("error_meta.json"))?;
        let source = match meta["source"].as_str() {
            Some("prior-based") => ErrorSource::PriorBased,
            _ => ErrorSource::PosteriorInformed,
        };
        Ok(ErrorStatistics {
            epsilon_mean: mean,
            epsilon_cov: cov,
            q_requested: meta["q_requested"].as_u64().unwrap_or(0) as usize,
            q_succeeded: meta["q_succeeded"].as_u64().unwrap_or(0) as usize,
            q_failed: meta["q_failed"].as_u64().unwrap_or(0) as usize,
            source,
            seed: meta["seed"].as_u64().unwrap_or(0),
        })
    }

    pub fn cmd_predict(&self, which: Which, noisy: bool) -> Result<StageOutcome> {
        let name = format!("predict-{}", which.dir());
        let dep = which.dir();
        self.run_stage(&name, &[dep], |files| {
            let (_, coarse) = self.build_models()?;
            let chain = self.load_chain(which)?;
            let n_draws = 400.min(chain.len());
            let seed = self.stage_seed(&name);
            let mut summary = posterior_predictive(
                &chain,
                coarse.as_ref(),
                n_draws,
                &DEFAULT_PREDICTIVE_LEVELS,
                &SeedStream::root(seed).child("draws"),
            )?;
            if noisy {
                // Noisy envelope: add error-model draws to each curve and
                // recompute the quantiles.
                let error_model = match which {
                    Which::Naive => self.noise(coarse.output_dim())?,
                    Which::Bae => {
                        let stats = self.load_error_statistics()?;
                        total_error_model(&self.noise(coarse.output_dim())?, &stats)?
                            .gaussian()
                            .clone()
                    }
                };
                let stream = SeedStream::root(seed).child("noise");
                for (i, curve) in summary.curves.iter_mut().enumerate() {
                    *curve += error_model.sample_one(&stream.index(i as u64))?;
                }
                for obs in 0..coarse.output_dim() {
                    let mut values: Vec<f64> =
                        summary.curves.iter().map(|c| c[obs]).collect();
                    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    for (col, &level) in DEFAULT_PREDICTIVE_LEVELS.iter().enumerate() {
                        summary.quantiles[(obs, col)] =
                            bae_core::bae::empirical_quantile(&values, level);
                    }
                }
            }
            let y_obs = self.load_y_obs()?;
            let coords = self.observation_coords(coarse.output_dim());

            let dir = self.out.join(&name);
            let header = "obs_index,well,depth,q_0.025,q_0.25,q_0.5,q_0.75,q_0.975,observed";
            let mut combined = format!("{header}\n");
            let mut per_well: std::collections::BTreeMap<usize, String> =
                std::collections::BTreeMap::new();
            for obs in 0..coarse.output_dim() {
                let (well, depth) = coords[obs];
                let mut line = format!("{obs},{well},{depth}");
                for col in 0..summary.levels.len() {
                    line.push_str(&format!(",{}", summary.quantiles[(obs, col)]));
                }
                line.push_str(&format!(",{}\n", y_obs[obs]));
                combined.push_str(&line);
                per_well
                    .entry(well)
                    .or_insert_with(|| format!("{header}\n"))
                    .push_str(&line);
            }
            std::fs::write(dir.join("predictive.csv"), combined)?;
            files.add(format!("{name}/predictive.csv"));
            if per_well.len() > 1 {
                for (well, body) in per_well {
                    let file = format!("well_{well}.csv");
                    std::fs::write(dir.join(&file), body)?;
                    files.add(format!("{name}/{file}"));
                }
            }
            write_json(
                &dir.join("predictive_meta.json"),
                &serde_json::json!({
                    "config_hash": self.hash,
                    "seed": seed,
                    "n_draws": summary.n_requested,
                    "n_failed": summary.n_failed,
                    "noisy": noisy,
                    "levels": summary.levels,
                }),
            )?;
            files.add(format!("{name}/predictive_meta.json"));
            Ok(())
        })
    }

    /// (well index, depth/abscissa) per observation, 1-based wells.
    fn observation_coords(&self, output_dim: usize) -> Vec<(usize, f64)> {
        match self.cfg.model.kind {
            ModelKind::Slice => {
                let section = self.cfg.model.slice.as_ref().unwrap();
                let slice = SliceConfig::with_grid(section.coarse_nx, section.coarse_nz)
                    .expect("validated config");
                slice
                    .observation_coords()
                    .into_iter()
                    .map(|(w, _, depth)| (w + 1, depth))
                    .collect()
            }
            ModelKind::Polynomial => {
                let section = self.cfg.model.polynomial.as_ref().unwrap();
                bae_core::forward::polynomial::equally_spaced(
                    section.t_min,
                    section.t_max,
                    section.n_points,
                )
                .into_iter()
                .map(|t| (1, t))
                .collect()
            }
            ModelKind::External => (0..output_dim).map(|i| (1, i as f64)).collect(),
        }
    }

    pub fn cmd_oracle(&self) -> Result<StageOutcome> {
        if self.cfg.model.kind != ModelKind::Polynomial {
            bail!("the oracle stage requires a polynomial model");
        }
        let deps: &[&str] = if self.cfg.data.synthesize.is_some() {
            &["synthesize"]
        } else {
            &[]
        };
        self.run_stage("oracle", deps, |files| {
            let problem = self.linear_problem()?;
            let nu_form = match self.cfg.bae.nu_form {
                NuFormKind::Total => NuForm::Total,
                NuFormKind::EpsilonOnly => NuForm::EpsilonOnly,
            };
            let posteriors = analytic_posteriors(&problem, nu_form)?;
            let maps: Vec<(PosteriorVariant, DVector<f64>)> = [
                PosteriorVariant::Naive,
                PosteriorVariant::Bae,
                PosteriorVariant::Truth,
            ]
            .into_iter()
            .map(|variant| Ok((variant, map_estimate(&problem, variant, nu_form)?)))
            .collect::<Result<_>>()?;

            // Projection-identity check on the coarse-order coordinates.
            let p = self.cfg.model.polynomial.as_ref().unwrap().coarse_order;
            let mut max_mean_gap = 0.0f64;
            let mut max_var_gap = 0.0f64;
            for i in 0..p.min(posteriors.bae.dim()) {
                max_mean_gap = max_mean_gap
                    .max((posteriors.bae.mean()[i] - posteriors.truth.mean()[i]).abs());
                max_var_gap = max_var_gap.max(
                    (posteriors.bae.covariance()[(i, i)]
                        - posteriors.truth.covariance()[(i, i)])
                    .abs(),
                );
            }
            let projection_pass = max_mean_gap < 1e-10 && max_var_gap < 1e-10;

            let gaussian_json = |g: &GaussianModel| {
                serde_json::json!({
                    "mean": g.mean().iter().copied().collect::<Vec<f64>>(),
                    "covariance": matrix_rows(g.covariance()),
                })
            };
            let dir = self.out.join("oracle");
            write_json(
                &dir.join("analytic.json"),
                &serde_json::json!({
                    "config_hash": self.hash,
                    "nu_form": self.cfg.bae.nu_form,
                    "naive": gaussian_json(&posteriors.naive),
                    "bae": gaussian_json(&posteriors.bae),
                    "true": gaussian_json(&posteriors.truth),
                    "nu_mean": posteriors.nu_mean.iter().copied().collect::<Vec<f64>>(),
                    "nu_covariance": matrix_rows(&posteriors.nu_cov),
                    "map_estimates": {
                        "naive": maps[0].1.iter().copied().collect::<Vec<f64>>(),
                        "bae": maps[1].1.iter().copied().collect::<Vec<f64>>(),
                        "true": maps[2].1.iter().copied().collect::<Vec<f64>>(),
                    },
                    "projection_identity": {
                        "coarse_order": p,
                        "max_mean_gap": max_mean_gap,
                        "max_variance_gap": max_var_gap,
                        "pass_at_1e-10": projection_pass,
                    },
                }),
            )?;
            files.add("oracle/analytic.json");

            // Sampled-vs-analytic comparison when chains exist.
            let mut comparison = serde_json::Map::new();
            for (which, analytic) in [
                (Which::Naive, &posteriors.naive),
                (Which::Bae, &posteriors.bae),
            ] {
                if self.out.join(which.dir()).join("chain_meta.json").exists() {
                    let chain = self.load_chain(which)?;
                    let (mean, sd) = chain.marginal_moments();
                    let deltas: Vec<f64> = (0..chain.dim())
                        .map(|c| {
                            (mean[c] - analytic.mean()[c])
                                / analytic.covariance()[(c, c)].sqrt()
                        })
                        .collect();
                    comparison.insert(
                        which.dir().to_string(),
                        serde_json::json!({
                            "sampled_mean": mean.iter().copied().collect::<Vec<f64>>(),
                            "sampled_sd": sd.iter().copied().collect::<Vec<f64>>(),
                            "mean_delta_in_posterior_sd": deltas,
                            "n_samples": chain.len(),
                        }),
                    );
                }
            }
            if !comparison.is_empty() {
                write_json(
                    &dir.join("comparison.json"),
                    &serde_json::Value::Object(comparison),
                )?;
                files.add("oracle/comparison.json");
            }
            Ok(())
        })
    }

    /// Assemble the linear-Gaussian problem matching a polynomial config.
    pub fn linear_problem(&self) -> Result<LinearProblem> {
        let section = self.cfg.model.polynomial.as_ref().unwrap();
        let (fine, coarse) = self.build_models()?;
        let fine_matrix = bae_core::forward::polynomial::poly_design_matrix(
            &bae_core::forward::polynomial::equally_spaced(
                section.t_min,
                section.t_max,
                section.n_points,
            ),
            section.fine_order,
        )?;
        let coarse_matrix = if section.coarse_order == section.fine_order {
            fine_matrix.clone()
        } else {
            bae_core::forward::polynomial::coarse_projection(&fine_matrix, section.coarse_order)?
        };
        let prior = match self.prior(fine.input_dim())? {
            PriorSpec::Gaussian(model) => model,
            PriorSpec::UniformBox { .. } => {
                bail!("the oracle stage requires a gaussian prior")
            }
        };
        let noise = self.noise(coarse.output_dim())?;
        let y_obs = self.load_y_obs()?;
        Ok(LinearProblem::new(
            fine_matrix,
            coarse_matrix,
            prior,
            noise,
            y_obs,
        )?)
    }

    pub fn cmd_report(&self) -> Result<StageOutcome> {
        let have_naive = self.out.join("naive").join("chain_meta.json").exists();
        let have_bae = self.out.join("bae").join("chain_meta.json").exists();
        if !have_naive && !have_bae {
            bail!("the report stage needs at least one completed chain (naive or bae)");
        }
        self.run_stage("report", &[], |files| {
            let (_, coarse) = self.build_models()?;
            let d = coarse.input_dim();
            let prior = self.prior(d)?;
            let naive_chain = if have_naive {
                Some(self.load_chain(Which::Naive)?)
            } else {
                None
            };
            let bae_chain = if have_bae {
                Some(self.load_chain(Which::Bae)?)
            } else {
                None
            };

            // Histogram ranges: box bounds, or prior mean +- 4 sd.
            let ranges: Vec<(f64, f64)> = match &prior {
                PriorSpec::UniformBox { lower, upper } => {
                    (0..d).map(|i| (lower[i], upper[i])).collect()
                }
                PriorSpec::Gaussian(model) => (0..d)
                    .map(|i| {
                        let sd = model.covariance()[(i, i)].sqrt();
                        (model.mean()[i] - 4.0 * sd, model.mean()[i] + 4.0 * sd)
                    })
                    .collect(),
            };
            let prior_draw_count = 20_000usize;
            let prior_source =
                prior.source(SeedStream::root(self.stage_seed("report")).child("prior-draws"));
            let prior_samples: Vec<DVector<f64>> = (0..prior_draw_count)
                .map(|i| prior_source.draw(i as u64))
                .collect();

            let bins = 40usize;
            let dir = self.out.join("report");
            for coord in 0..d {
                let (lo, hi) = ranges[coord];
                let histogram = |values: Vec<f64>| -> Vec<u64> {
                    let mut counts = vec![0u64; bins];
                    for v in values {
                        let pos = ((v - lo) / (hi - lo) * bins as f64).floor();
                        let bin = (pos as i64).clamp(0, bins as i64 - 1) as usize;
                        counts[bin] += 1;
                    }
                    counts
                };
                let prior_counts = histogram(prior_samples.iter().map(|s| s[coord]).collect());
                let naive_counts = naive_chain
                    .as_ref()
                    .map(|c| histogram(c.flat_samples().iter().map(|s| s[coord]).collect()));
                let bae_counts = bae_chain
                    .as_ref()
                    .map(|c| histogram(c.flat_samples().iter().map(|s| s[coord]).collect()));

                let mut out = String::from("bin_left,bin_right,prior,naive,bae\n");
                for b in 0..bins {
                    let left = lo + (hi - lo) * b as f64 / bins as f64;
                    let right = lo + (hi - lo) * (b + 1) as f64 / bins as f64;
                    let naive_cell = naive_counts
                        .as_ref()
                        .map(|c| c[b].to_string())
                        .unwrap_or_default();
                    let bae_cell = bae_counts
                        .as_ref()
                        .map(|c| c[b].to_string())
                        .unwrap_or_default();
                    out.push_str(&format!(
                        "{left},{right},{},{naive_cell},{bae_cell}\n",
                        prior_counts[b]
                    ));
                }
                let file = format!("hist_k_{:02}.csv", coord + 1);
                std::fs::write(dir.join(&file), out)?;
                files.add(format!("report/{file}"));
            }

            // Feasibility against the synthetic truth, when known.
            let truth = self.truth();
            let feasibility = |chain: &Option<Chain>| -> Result<Option<FeasibilityReport>> {
                match (chain, &truth) {
                    (Some(chain), Some(truth)) => Ok(Some(feasibility_summary(
                        chain,
                        truth,
                        &DEFAULT_FEASIBILITY_LEVELS,
                    )?)),
                    _ => Ok(None),
                }
            };
            let naive_feasibility = feasibility(&naive_chain)?;
            let bae_feasibility = feasibility(&bae_chain)?;
            let naive_excluded_95 = naive_feasibility
                .as_ref()
                .map(|f| f.excluded_at(0.95))
                .unwrap_or_default();
            let bae_contained_99 = bae_feasibility
                .as_ref()
                .map(|f| f.all_contained_at(0.99));
            let phenomenon = !naive_excluded_95.is_empty() && bae_contained_99 == Some(true);

            // Wall-clock table (volatile: excluded from byte-identity checks).
            let manifest = RunManifest::load_or_new(&self.out, &self.hash, self.cfg.run.seed)?;
            let mut timings = String::from("stage,wall_clock_s,model_failures\n");
            for (stage, record) in &manifest.stages {
                timings.push_str(&format!(
                    "{stage},{},{}\n",
                    record.wall_clock_s, record.model_failures
                ));
            }
            std::fs::write(dir.join("timings.csv"), timings)?;
            files.add_volatile("report/timings.csv");

            let telemetry: serde_json::Value = {
                let read_failures = |which: &str| -> u64 {
                    read_json::<ChainMeta>(
                        &self.out.join(which).join("chain_meta.json"),
                    )
                    .map(|m| m.model_failures)
                    .unwrap_or(0)
                };
                serde_json::json!({
                    "naive_model_failures": read_failures("naive"),
                    "bae_model_failures": read_failures("bae"),
                })
            };

            write_json(
                &dir.join("report.json"),
                &serde_json::json!({
                    "config_hash": self.hash,
                    "histograms": (1..=d)
                        .map(|i| format!("hist_k_{i:02}.csv"))
                        .collect::<Vec<String>>(),
                    "histogram_samples": {
                        "prior": prior_draw_count,
                        "naive": naive_chain.as_ref().map(|c| c.len()),
                        "bae": bae_chain.as_ref().map(|c| c.len()),
                    },
                    "feasibility": {
                        "naive": naive_feasibility,
                        "bae": bae_feasibility,
                    },
                    "flags": {
                        "naive_excluded_at_95": naive_excluded_95,
                        "bae_all_contained_at_99": bae_contained_99,
                        "naive_infeasible_bae_feasible": phenomenon,
                    },
                    "failure_telemetry": telemetry,
                    "timings_file": "timings.csv",
                }),
            )?;
            files.add("report/report.json");
            Ok(())
        })
    }
}

fn matrix_rows(matrix: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..matrix.nrows())
        .map(|i| (0..matrix.ncols()).map(|j| matrix[(i, j)]).collect())
        .collect()
}

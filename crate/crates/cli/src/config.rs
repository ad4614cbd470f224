//! Pipeline configuration: a single TOML file with nested sections, strictly
//! validated (unknown keys are errors) before any compute starts.
//!
//! All randomness flows from `[run] seed`; stages derive their own streams
//! from it by label. The effective configuration (after command-line
//! overrides) is hashed and stamped into every artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Preset problem sizes for the slice study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 40x50 / 8x10 grids, 24 walkers x 3000 steps, q = 200; finishes in
    /// minutes.
    Desk,
    /// 80x100 / 16x20 grids, 300 walkers x 500 steps, q = 1000.
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub prior: PriorSection,
    pub noise: NoiseSection,
    pub mcmc: McmcSection,
    pub bae: BaeSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polynomial: Option<PolynomialModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<SliceModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalModelSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Polynomial,
    Slice,
    External,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialModelSection {
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    #[serde(default)]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    pub fine_order: usize,
    pub coarse_order: usize,
}

fn default_n_points() -> usize {
    30
}

fn default_t_max() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceModelSection {
    pub fine_nx: usize,
    pub fine_nz: usize,
    pub coarse_nx: usize,
    pub coarse_nz: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basal_heat_flux: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_mass_flux: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_enthalpy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal_conductivity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub porosity: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalModelSection {
    pub fine: ExternalEndpoint,
    pub coarse: ExternalEndpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEndpoint {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_timeout_s() -> u64 {
    300
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub kind: PriorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    /// Full covariance as rows; overrides `sd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_rows: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    UniformBox,
    Gaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_noise_kind")]
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_file: Option<PathBuf>,
    /// Noise mean (e*); defaults to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Iid,
    Multilevel,
    File,
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::Iid
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSection {
    pub walkers: usize,
    pub steps: usize,
    pub burn_in: usize,
    #[serde(default = "default_ensembles")]
    pub ensembles: usize,
    #[serde(default = "default_stretch")]
    pub stretch_a: f64,
    #[serde(default = "default_thin")]
    pub thin: usize,
}

fn default_ensembles() -> usize {
    1
}

fn default_stretch() -> f64 {
    2.0
}

fn default_thin() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaeSection {
    pub q: usize,
    #[serde(default = "default_bae_source")]
    pub source: BaeSourceKind,
    #[serde(default)]
    pub failure_policy: FailurePolicyKind,
    #[serde(default)]
    pub nu_form: NuFormKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaeSourceKind {
    PriorBased,
    PosteriorInformed,
}

fn default_bae_source() -> BaeSourceKind {
    BaeSourceKind::PosteriorInformed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicyKind {
    #[default]
    Replace,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NuFormKind {
    #[default]
    Total,
    EpsilonOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Path to an existing observation CSV (obs_index,value).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_obs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesize: Option<SynthesizeSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeSection {
    pub truth: Vec<f64>,
}

/// Command-line overrides applied on top of a parsed config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub workers: Option<usize>,
    pub profile: Option<Profile>,
}

impl PipelineConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: PipelineConfig = toml::from_str(&text)?;
        cfg.apply_overrides(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.run.seed = seed;
        }
        if let Some(output) = &overrides.output {
            self.run.output = output.clone();
        }
        if let Some(workers) = overrides.workers {
            self.run.workers = workers;
        }
        if let Some(profile) = overrides.profile {
            self.apply_profile(profile);
        }
    }

    /// Profile presets override grid sizes, sampler effort and the fine-run
    /// budget; only meaningful for the slice study.
    pub fn apply_profile(&mut self, profile: Profile) {
        if let Some(slice) = &mut self.model.slice {
            match profile {
                Profile::Desk => {
                    slice.fine_nx = 40;
                    slice.fine_nz = 50;
                    slice.coarse_nx = 8;
                    slice.coarse_nz = 10;
                    self.mcmc.walkers = 24;
                    self.mcmc.steps = 3000;
                    self.mcmc.burn_in = 600;
                    self.bae.q = 200;
                }
                Profile::Paper => {
                    slice.fine_nx = 80;
                    slice.fine_nz = 100;
                    slice.coarse_nx = 16;
                    slice.coarse_nz = 20;
                    self.mcmc.walkers = 300;
                    self.mcmc.steps = 500;
                    self.mcmc.burn_in = 100;
                    self.bae.q = 1000;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.model.kind {
            ModelKind::Polynomial => {
                let section = self
                    .model
                    .polynomial
                    .as_ref()
                    .ok_or_else(|| invalid("[model.polynomial] required for kind"))?;
                if section.coarse_order > section.fine_order || section.coarse_order == 0 {
                    return Err(invalid(format!(
                        "coarse_order must satisfy 1 <= coarse_order <= fine_order, got {} vs {}",
                        section.coarse_order, section.fine_order
                    )));
                }
                if section.n_points == 0 {
                    return Err(invalid("n_points must be positive"));
                }
            }
            ModelKind::Slice => {
                let section = self
                    .model
                    .slice
                    .as_ref()
                    .ok_or_else(|| invalid("[model.slice] required for kind"))?;
                for (name, v) in [
                    ("fine_nx", section.fine_nx),
                    ("fine_nz", section.fine_nz),
                    ("coarse_nx", section.coarse_nx),
                    ("coarse_nz", section.coarse_nz),
                ] {
                    if v < 4 {
                        return Err(invalid(format!("{name} must be at least 4, got {v}")));
                    }
                }
            }
            ModelKind::External => {
                self.model
                    .external
                    .as_ref()
                    .ok_or_else(|| invalid("[model.external] required for kind"))?;
            }
        }
        match self.prior.kind {
            PriorKind::UniformBox => {
                if self.prior.lower.is_none() || self.prior.upper.is_none() {
                    return Err(invalid("uniform-box prior needs lower and upper"));
                }
            }
            PriorKind::Gaussian => {
                if self.prior.mean.is_none() {
                    return Err(invalid("gaussian prior needs mean"));
                }
                if self.prior.sd.is_none() && self.prior.cov_rows.is_none() {
                    return Err(invalid("gaussian prior needs sd or cov_rows"));
                }
            }
        }
        match self.noise.kind {
            NoiseKind::Iid => {
                if self.noise.sd.is_none() {
                    return Err(invalid("iid noise needs sd"));
                }
            }
            NoiseKind::Multilevel => {
                if self.noise.sd.is_none()
                    || self.noise.mixing.is_none()
                    || self.noise.blocks.is_none()
                {
                    return Err(invalid("multilevel noise needs sd, mixing and blocks"));
                }
            }
            NoiseKind::File => {
                if self.noise.cov_file.is_none() {
                    return Err(invalid("file noise needs cov_file"));
                }
            }
        }
        if self.mcmc.walkers == 0 || self.mcmc.walkers % 2 != 0 {
            return Err(invalid(format!(
                "walkers must be positive and even, got {}",
                self.mcmc.walkers
            )));
        }
        if self.mcmc.steps == 0 {
            return Err(invalid("steps must be positive"));
        }
        if self.mcmc.ensembles == 0 {
            return Err(invalid("ensembles must be positive"));
        }
        if !(self.mcmc.stretch_a > 1.0) {
            return Err(invalid("stretch_a must exceed 1"));
        }
        if self.bae.q < 2 {
            return Err(invalid("bae q must be at least 2"));
        }
        if self.data.y_obs.is_none() && self.data.synthesize.is_none() {
            return Err(invalid("[data] needs either y_obs or a synthesize block"));
        }
        if self.data.y_obs.is_some() && self.data.synthesize.is_some() {
            return Err(invalid("[data] y_obs and synthesize are mutually exclusive"));
        }
        if self.run.workers == 0 {
            return Err(invalid("workers must be positive"));
        }
        Ok(())
    }

    /// Hash of the effective configuration (canonical JSON of the resolved
    /// struct). Stamped into artifacts and used for idempotence checks.
    ///
    /// The output directory and worker count are excluded: they do not
    /// influence any artifact bytes (results are deterministic in the seed
    /// regardless of parallelism), so the hash identifies the computation
    /// rather than its placement.
    pub fn config_hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.run.output = PathBuf::new();
        normalized.run.workers = 0;
        let canonical = serde_json::to_string(&normalized).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(digest)
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::dynamics::{InitLaw, Integrator, SamplerKind, SamplerSpec, Schedule};
use crate::entropy::EntropyMethod;
use crate::error::{Error, Result};
use crate::gmm::MixtureModel;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Mixture parameters, inline or loaded from `file` (same keys, TOML).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub file: Option<PathBuf>,
    pub weights: Option<Vec<f64>>,
    pub means: Option<Vec<Vec<f64>>>,
    /// Defaults to the identity.
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Guided label, 0-based.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariance: Option<Vec<Vec<f64>>>,
    label: Option<usize>,
}

impl ModelSpec {
    fn resolve(&self, base: Option<&Path>) -> Result<(MixtureModel, usize)> {
        let (weights, means, covariance, label) = match &self.file {
            Some(file) => {
                if self.weights.is_some() || self.means.is_some() || self.covariance.is_some() {
                    return Err(config_err("model: give either `file` or inline parameters, not both"));
                }
                let path = match base {
                    Some(dir) if file.is_relative() => dir.join(file),
                    _ => file.clone(),
                };
                let text = fs::read_to_string(&path)
                    .map_err(|e| config_err(format!("model file {}: {e}", path.display())))?;
                let parsed: ModelFile = toml::from_str(&text)
                    .map_err(|e| config_err(format!("model file {}: {e}", path.display())))?;
                (parsed.weights, parsed.means, parsed.covariance, self.label.or(parsed.label))
            }
            None => (
                self.weights.clone().ok_or_else(|| config_err("model: missing `weights`"))?,
                self.means.clone().ok_or_else(|| config_err("model: missing `means`"))?,
                self.covariance.clone(),
                self.label,
            ),
        };
        let d = means.first().map_or(0, Vec::len);
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(config_err("model: means must be non-empty rows of equal length"));
        }
        let cov = match covariance {
            None => DMatrix::identity(d, d),
            Some(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(config_err(format!("model: covariance must be {d} x {d}")));
                }
                DMatrix::from_fn(d, d, |i, j| rows[i][j])
            }
        };
        let means = means.into_iter().map(DVector::from_vec).collect();
        let model = MixtureModel::new(weights, means, cov).map_err(|e| config_err(e.to_string()))?;
        let label = label.unwrap_or(0);
        if label >= model.num_components() {
            return Err(config_err(format!(
                "model: label {label} out of range for {} components",
                model.num_components()
            )));
        }
        Ok((model, label))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub etas: Vec<f64>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec {
            etas: vec![0.0, 1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_kind")]
    pub kind: SamplerKind,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Substeps of the continuous DDIM integrator.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub method: Integrator,
    /// Constant step of the schedule-based samplers.
    pub delta: Option<f64>,
    /// Explicit step sizes, overriding `delta`.
    pub steps: Option<Vec<f64>>,
}

fn default_kind() -> SamplerKind {
    SamplerKind::DdimCont
}

fn default_horizon() -> f64 {
    10.0
}

fn default_substeps() -> usize {
    1000
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: default_kind(),
            horizon: default_horizon(),
            substeps: default_substeps(),
            method: Integrator::default(),
            delta: None,
            steps: None,
        }
    }
}

impl SamplerConfig {
    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or(0.01)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match &self.steps {
            Some(steps) => Schedule::from_steps(self.horizon, steps.clone()),
            None => Schedule::constant_step(self.horizon, self.delta()),
        }
        .map_err(|e| config_err(format!("sampler: {e}")))
    }

    pub fn schedule_with_delta(&self, delta: f64) -> Result<Schedule> {
        Schedule::constant_step(self.horizon, delta).map_err(|e| config_err(format!("sampler: {e}")))
    }

    /// Sampler description for `kind`, sharing this config's horizon and grid.
    pub fn spec_for(&self, kind: SamplerKind) -> Result<SamplerSpec> {
        Ok(match kind {
            SamplerKind::DdimCont => {
                if self.substeps == 0 {
                    return Err(config_err("sampler: substeps must be >= 1"));
                }
                SamplerSpec::DdimContinuous {
                    horizon: self.horizon,
                    substeps: self.substeps,
                    method: self.method,
                }
            }
            SamplerKind::DdpmCont => SamplerSpec::DdpmContinuous {
                schedule: self.schedule()?,
            },
            SamplerKind::DdimDisc => SamplerSpec::DdimDiscrete {
                schedule: self.schedule()?,
            },
            SamplerKind::DdpmDisc => SamplerSpec::DdpmDiscrete {
                schedule: self.schedule()?,
            },
        })
    }

    pub fn spec(&self) -> Result<SamplerSpec> {
        self.spec_for(self.kind)
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, SamplerKind::DdimDisc | SamplerKind::DdpmDisc)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    Point {
        x0: Vec<f64>,
    },
    #[default]
    StandardGaussian,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Emit {
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default)]
    pub svg: bool,
}

fn yes() -> bool {
    true
}

impl Default for Emit {
    fn default() -> Self {
        Emit { csv: true, svg: false }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    /// Step sizes to scan; defaults to the sampler's `delta`.
    pub deltas: Option<Vec<f64>>,
    /// Threshold on `|<x_T, mu>| / ||mu||`; defaults to `||mu|| / 2`.
    pub split_radius: Option<f64>,
    /// Extra strengths appended per step size as multiples of the splitting threshold.
    #[serde(default)]
    pub eta_prime_multiples: Vec<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    /// Grid points per axis for the KDE evaluation; defaults to 40 in d <= 2, 12 in d = 3.
    pub grid_points: Option<usize>,
}

impl DensitySpec {
    /// Points per axis, or `None` when the grid is skipped (d > 3).
    pub fn per_axis(&self, dim: usize) -> Option<usize> {
        match dim {
            1 | 2 => Some(self.grid_points.unwrap_or(40)),
            3 => Some(self.grid_points.unwrap_or(12)),
            _ => None,
        }
        .filter(|n| *n >= 2)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default = "default_n")]
    pub n_samples: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub emit: Emit,
    pub entropy: Option<EntropyMethod>,
    #[serde(default)]
    pub phase: PhaseSpec,
    #[serde(default)]
    pub density: DensitySpec,
    /// Paths recorded in full by `simulate`.
    #[serde(default = "default_record")]
    pub record_paths: usize,
}

fn default_n() -> usize {
    10_000
}

fn default_record() -> usize {
    1
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<PathBuf>)> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Ok((cfg, path.parent().map(Path::to_path_buf)))
    }
}

/// Validated configuration with the model built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: MixtureModel,
    pub label: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Experiment {
    /// Validates `config`; `seed` and `out` override the file values.
    pub fn new(
        config: ExperimentConfig,
        base: Option<&Path>,
        seed: Option<u64>,
        out: Option<PathBuf>,
    ) -> Result<Self> {
        let (model, label) = config.model.resolve(base)?;
        let etas = &config.guidance.etas;
        if etas.is_empty() {
            return Err(config_err("guidance: `etas` must be non-empty"));
        }
        if etas.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(config_err("guidance: strengths must be finite and >= 0"));
        }
        if config.n_samples == 0 {
            return Err(config_err("n_samples must be >= 1"));
        }
        if !config.sampler.horizon.is_finite() || config.sampler.horizon <= 0.0 {
            return Err(config_err("sampler: horizon must be positive"));
        }
        config.sampler.spec()?;
        if let InitSpec::Point { x0 } = &config.init {
            if x0.len() != model.dim() {
                return Err(config_err(format!(
                    "init: x0 has length {}, model dimension is {}",
                    x0.len(),
                    model.dim()
                )));
            }
        }
        let stochastic = config.sampler.spec()?.is_stochastic()
            || matches!(config.init, InitSpec::StandardGaussian);
        let seed = match seed.or(config.seed) {
            Some(s) => s,
            None if stochastic => {
                return Err(config_err("a seed is required for stochastic runs (set `seed` or --seed)"))
            }
            None => 0,
        };
        let out = out
            .or_else(|| config.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Experiment {
            config,
            model,
            label,
            seed,
            out,
        })
    }

    pub fn init_law(&self) -> InitLaw {
        match &self.config.init {
            InitSpec::Point { x0 } => InitLaw::Point(DVector::from_vec(x0.clone())),
            InitSpec::StandardGaussian => InitLaw::StandardGaussian,
        }
    }

    pub fn etas(&self) -> &[f64] {
        &self.config.guidance.etas
    }
}

//! Run configuration read from TOML.
//!
//! Every table rejects unknown keys and the file must declare
//! `schema_version`. Model sections are optional so that a dynamics-only
//! configuration stays short; commands that need a model report missing
//! sections as configuration errors.

use std::path::{Path, PathBuf};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsKernel, NeuralFieldKernel, SpaceTimeGrid, WaveKernel};
use crate::error::{Error, Result};
use crate::grid::{build_binning, Grid, ModeBinning};
use crate::infer::{AdviOptions, MapOptions, Method, MgviOptions};
use crate::linop::CgConfig;
use crate::model::{random_chords, Chord, GenerativeModel, PointwiseNonlinearity, ResponseSpec, SpectrumPrior};
use crate::scalar::Real;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub grid: Option<GridConfig>,
    pub spectrum: Option<SpectrumConfig>,
    pub nonlinearity: Option<PointwiseNonlinearity>,
    pub response: Option<ResponseConfig>,
    pub noise: Option<NoiseConfig>,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    pub dynamics: Option<DynamicsConfig>,
    #[serde(default)]
    pub fixture: FixtureConfig,
}

/// Exactly one of `extent` and `pixel_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub shape: Vec<usize>,
    pub extent: Option<Vec<f64>>,
    pub pixel_size: Option<Vec<f64>>,
}

impl GridConfig {
    pub fn build(&self) -> Result<Grid> {
        match (&self.extent, &self.pixel_size) {
            (Some(e), None) => Grid::with_extent(self.shape.clone(), e),
            (None, Some(p)) => Grid::new(self.shape.clone(), p.clone()),
            _ => Err(Error::InvalidParameter(
                "grid needs exactly one of `extent` and `pixel_size`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    pub k0: f64,
    pub bins_per_decade: usize,
    pub prior: SpectrumPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResponseConfig {
    Mask {
        indices: Vec<usize>,
    },
    FullMask,
    LineOfSight {
        chords: Vec<Chord>,
        #[serde(default = "default_step_fraction")]
        step_fraction: f64,
    },
    /// Chords between uniformly drawn points.
    RandomLines {
        count: usize,
        #[serde(default)]
        chord_seed: u64,
        #[serde(default = "default_step_fraction")]
        step_fraction: f64,
    },
}

fn default_step_fraction() -> f64 {
    0.5
}

impl ResponseConfig {
    pub fn build(&self, grid: &Grid) -> ResponseSpec {
        match self {
            Self::Mask { indices } => ResponseSpec::Mask {
                indices: indices.clone(),
            },
            Self::FullMask => ResponseSpec::full_mask(grid),
            Self::LineOfSight { chords, step_fraction } => ResponseSpec::LineOfSight {
                chords: chords.clone(),
                step_fraction: *step_fraction,
            },
            Self::RandomLines {
                count,
                chord_seed,
                step_fraction,
            } => ResponseSpec::LineOfSight {
                chords: random_chords(grid, *count, *chord_seed),
                step_fraction: *step_fraction,
            },
        }
    }
}

/// Gaussian noise level for simulated data. `signal_to_noise` sets
/// `sigma = std(R'(s)) / signal_to_noise` from the noiseless data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: Option<f64>,
    pub signal_to_noise: Option<f64>,
    /// Writes `d = R'(s)` while keeping the nominal sigma in the sidecar.
    #[serde(default)]
    pub zero_noise: bool,
}

impl NoiseConfig {
    pub fn sigma_for(&self, noiseless: &[f64]) -> Result<f64> {
        let sigma = match (self.sigma, self.signal_to_noise) {
            (Some(s), None) => s,
            (None, Some(snr)) => {
                if !(snr > 0.0) {
                    return Err(Error::InvalidParameter("signal_to_noise must be positive".into()));
                }
                let n = noiseless.len() as f64;
                let mean = noiseless.iter().sum::<f64>() / n;
                let var = noiseless.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                var.sqrt() / snr
            }
            _ => {
                return Err(Error::InvalidParameter(
                    "noise needs exactly one of `sigma` and `signal_to_noise`".into(),
                ))
            }
        };
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise sigma must be positive, got {sigma}")));
        }
        Ok(sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `data.bin`/`data.toml`; relative to the config file.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub method: Method,
    /// Initial latent point is `init_scale * N(0, 1)`.
    pub init_scale: f64,
    /// Posterior sample fields written for ADVI and MGVI.
    pub posterior_samples: usize,
    pub map: MapConfig,
    pub advi: AdviConfig,
    pub mgvi: MgviConfig,
    pub cg: CgSettings,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            method: Method::Mgvi,
            init_scale: 0.1,
            posterior_samples: 8,
            map: MapConfig::default(),
            advi: AdviConfig::default(),
            mgvi: MgviConfig::default(),
            cg: CgSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: Option<f64>,
}

impl Default for MapConfig {
    fn default() -> Self {
        let d = MapOptions::<f64>::default();
        Self {
            max_iterations: d.max_iterations,
            gradient_tolerance: d.gradient_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdviConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub samples_per_step: usize,
}

impl Default for AdviConfig {
    fn default() -> Self {
        let d = AdviOptions::<f64>::default();
        Self {
            iterations: d.iterations,
            learning_rate: d.learning_rate,
            samples_per_step: d.samples_per_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MgviConfig {
    pub n_pairs: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub inner_gradient_tolerance: f64,
    /// Pairs redrawn at the final mean for the reported samples.
    pub report_pairs: Option<usize>,
}

impl Default for MgviConfig {
    fn default() -> Self {
        let d = MgviOptions::<f64>::default();
        Self {
            n_pairs: d.n_pairs,
            outer_iterations: d.outer_iterations,
            inner_iterations: d.inner_iterations,
            inner_gradient_tolerance: d.inner_gradient_tolerance,
            report_pairs: d.report_pairs,
        }
    }
}

/// CG settings for Wiener solves and MGVI sampling. Missing values fall back
/// to engine defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgSettings {
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
}

impl CgSettings {
    pub fn build<T: Real>(&self, dim: usize, default_tolerance: f64) -> CgConfig<T> {
        let cg = CgConfig::for_dimension(dim).with_tolerance(T::lit(self.tolerance.unwrap_or(default_tolerance)));
        match self.max_iterations {
            Some(n) => cg.with_max_iterations(n),
            None => cg,
        }
    }

    pub fn is_set(&self) -> bool {
        self.tolerance.is_some() || self.max_iterations.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub gradient_points: usize,
    pub gradient_step: f64,
    pub gradient_tolerance: f64,
    /// Fraction of gradient points that must pass.
    pub gradient_pass_fraction: f64,
    pub adjoint_trials: usize,
    pub adjoint_tolerance: f64,
    pub standardization_draws: usize,
    pub standardization_tolerance: f64,
    pub fisher_points: usize,
    pub fisher_probes: usize,
    pub fisher_symmetry_tolerance: f64,
    /// Noise sigma of the synthetic data used by the likelihood checks.
    pub noise_sigma: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            gradient_points: 100,
            gradient_step: 1e-4,
            gradient_tolerance: 1e-5,
            gradient_pass_fraction: 0.99,
            adjoint_trials: 8,
            adjoint_tolerance: 1e-10,
            standardization_draws: 5000,
            standardization_tolerance: 0.05,
            fisher_points: 5,
            fisher_probes: 20,
            fisher_symmetry_tolerance: 1e-10,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Wave {
        c: f64,
        damping: f64,
    },
    /// Neural field with a mode-independent coupling spectrum.
    Neural {
        coupling_re: f64,
        #[serde(default)]
        coupling_im: f64,
        f_prime: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub kernel: KernelConfig,
    pub space: GridConfig,
    pub n_t: usize,
    pub dt: f64,
    #[serde(default = "default_realizations")]
    pub realizations: u32,
    #[serde(default = "default_spectrum_bins")]
    pub omega_bins: usize,
    #[serde(default = "default_spectrum_bins")]
    pub k_bins: usize,
    /// Bins with fewer modes are reported but not judged.
    #[serde(default = "default_min_bin_modes")]
    pub min_bin_modes: usize,
    /// Relative tolerance on the binned spectrum ratio.
    #[serde(default = "default_spectrum_tolerance")]
    pub tolerance: f64,
}

fn default_realizations() -> u32 {
    200
}

fn default_spectrum_bins() -> usize {
    4
}

fn default_min_bin_modes() -> usize {
    31
}

fn default_spectrum_tolerance() -> f64 {
    0.1
}

impl DynamicsConfig {
    pub fn space_time_grid(&self) -> Result<SpaceTimeGrid> {
        SpaceTimeGrid::new(self.space.build()?, self.n_t, self.dt)
    }

    pub fn kernel(&self, stgrid: &SpaceTimeGrid) -> Result<DynamicsKernel> {
        Ok(match self.kernel {
            KernelConfig::Wave { c, damping } => DynamicsKernel::Wave(WaveKernel::new(c, damping)?),
            KernelConfig::Neural {
                coupling_re,
                coupling_im,
                f_prime,
            } => DynamicsKernel::Neural(NeuralFieldKernel::uniform(
                Complex::new(coupling_re, coupling_im),
                f_prime,
                stgrid,
            )?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    /// Flips the sign of the response adjoint; only useful to exercise the
    /// validation suite.
    pub broken_response_adjoint: bool,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    /// Parses and checks a file. Relative data paths are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(data) = &mut config.data {
            if data.dir.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                data.dir = base.join(&data.dir);
            }
        }
        Ok(config)
    }

    fn check(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.has_model() {
            self.model::<f64>()?;
        }
        if let Some(d) = &self.dynamics {
            let st = d.space_time_grid()?;
            d.kernel(&st)?;
        }
        Ok(())
    }

    fn has_model(&self) -> bool {
        self.grid.is_some() || self.spectrum.is_some() || self.nonlinearity.is_some() || self.response.is_some()
    }

    fn section<'a, S>(value: &'a Option<S>, name: &str) -> Result<&'a S> {
        value
            .as_ref()
            .ok_or_else(|| Error::Format(format!("missing [{name}] section")))
    }

    pub fn build_grid(&self) -> Result<Grid> {
        let grid = Self::section(&self.grid, "grid")?.build()?;
        if grid.size() < 2 {
            return Err(Error::InvalidGrid("a model grid needs at least two pixels".into()));
        }
        Ok(grid)
    }

    pub fn binning(&self) -> Result<ModeBinning> {
        let spectrum = Self::section(&self.spectrum, "spectrum")?;
        build_binning(&self.build_grid()?, spectrum.k0, spectrum.bins_per_decade)
    }

    pub fn response_spec(&self, grid: &Grid) -> Result<ResponseSpec> {
        Ok(Self::section(&self.response, "response")?.build(grid))
    }

    pub fn model<T: Real>(&self) -> Result<GenerativeModel<T>> {
        let binning = self.binning()?;
        let spectrum = Self::section(&self.spectrum, "spectrum")?;
        let nonlinearity = *Self::section(&self.nonlinearity, "nonlinearity")?;
        let response = self.response_spec(binning.grid())?;
        let model = GenerativeModel::new(binning, spectrum.prior.clone(), nonlinearity, response)?;
        Ok(if self.fixture.broken_response_adjoint {
            model.with_broken_response_adjoint()
        } else {
            model
        })
    }

    pub fn noise(&self) -> Result<&NoiseConfig> {
        Self::section(&self.noise, "noise")
    }

    pub fn data_dir(&self) -> Result<&Path> {
        Ok(&Self::section(&self.data, "data")?.dir)
    }

    pub fn dynamics(&self) -> Result<&DynamicsConfig> {
        Self::section(&self.dynamics, "dynamics")
    }

    pub fn map_options<T: Real>(&self) -> MapOptions<T> {
        let c = &self.inference.map;
        MapOptions {
            max_iterations: c.max_iterations,
            gradient_tolerance: c.gradient_tolerance.map(T::lit),
            ..MapOptions::default()
        }
    }

    pub fn advi_options<T: Real>(&self, seed: u64) -> AdviOptions<T> {
        let c = &self.inference.advi;
        AdviOptions {
            iterations: c.iterations,
            learning_rate: T::lit(c.learning_rate),
            samples_per_step: c.samples_per_step,
            report_samples: self.inference.posterior_samples,
            seed,
            ..AdviOptions::default()
        }
    }

    pub fn mgvi_options<T: Real>(&self, seed: u64, dim: usize) -> MgviOptions<T> {
        let c = &self.inference.mgvi;
        let cg = &self.inference.cg;
        MgviOptions {
            n_pairs: c.n_pairs,
            outer_iterations: c.outer_iterations,
            inner_iterations: c.inner_iterations,
            inner_gradient_tolerance: T::lit(c.inner_gradient_tolerance),
            sampling_cg: cg.is_set().then(|| cg.build(dim, 1e-6)),
            report_pairs: c.report_pairs,
            seed,
            ..MgviOptions::default()
        }
    }
}

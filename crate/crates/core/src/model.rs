//! Standardized generative field model.
//!
//! Latent white noise `zeta = (xi, eta, xi0)` is mapped through
//!
//! ```text
//! psi    = psi_bar(kappa) + A_psi eta             log-power per bin
//! P(k)   = P0 exp(psi(kappa(k)))                  zero mode: zero_mode_std^2
//! phi    = (N V)^{-1/2} H (sqrt(P) * xi_full)     Hartley synthesis
//! s      = nonlinearity(phi)
//! d'     = R' s
//! ```
//!
//! `H` is the real Hartley basis `cos(k.x) + sin(k.x)`, which keeps every
//! latent entry real while `phi` gets covariance `F^-1 diag(P) F^-1†`.
//! Every stage ships its own tangent and cotangent map; [`GenerativeModel::jvp`]
//! and [`GenerativeModel::vjp`] chain them.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, HarmonicTransform, ModeBinning};
use crate::linop::{cholesky, LinearOperator};
use crate::rng;
use crate::scalar::{dot, Real};

/// Largest admissible `|psi|` in any bin.
pub const PSI_OVERFLOW_LIMIT: f64 = 60.0;

/// Block sizes of a latent vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentLayout {
    pub n_xi: usize,
    pub n_eta: usize,
}

impl LatentLayout {
    /// Total number of latent degrees of freedom (the trailing one is `xi0`).
    pub fn len(&self) -> usize {
        self.n_xi + self.n_eta + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Standardized latent variables. Flat order: `xi`, then `eta`, then `xi0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector<T> {
    pub xi: Vec<T>,
    pub eta: Vec<T>,
    pub xi_zero: T,
}

impl<T: Real> LatentVector<T> {
    pub fn zeros(layout: LatentLayout) -> Self {
        Self {
            xi: vec![T::zero(); layout.n_xi],
            eta: vec![T::zero(); layout.n_eta],
            xi_zero: T::zero(),
        }
    }

    pub fn layout(&self) -> LatentLayout {
        LatentLayout {
            n_xi: self.xi.len(),
            n_eta: self.eta.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.layout().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn from_flat(layout: LatentLayout, flat: &[T]) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                got: flat.len(),
                context: "flat latent vector",
            });
        }
        Ok(Self {
            xi: flat[..layout.n_xi].to_vec(),
            eta: flat[layout.n_xi..layout.n_xi + layout.n_eta].to_vec(),
            xi_zero: flat[layout.len() - 1],
        })
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.xi);
        out.extend_from_slice(&self.eta);
        out.push(self.xi_zero);
        out
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.xi, &other.xi) + dot(&self.eta, &other.eta) + self.xi_zero * other.xi_zero
    }

    pub fn norm_sqr(&self) -> T {
        self.dot(self)
    }

    /// Standard normal draw, the latent prior.
    pub fn sample<R: Rng + ?Sized>(layout: LatentLayout, rng: &mut R) -> Self {
        let flat = rng::standard_normal_vec(rng, layout.len());
        Self::from_flat(layout, &flat).expect("layout length")
    }
}

/// How modes read their log-power from the binned spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumInterpolation {
    /// Each mode inherits the value of its bin.
    #[default]
    PiecewiseConstant,
    /// Linear in `kappa` between neighbouring bin centers, constant beyond the ends.
    Linear,
}

/// Hyperparameters of the log-power-spectrum prior `G(psi - psi_bar, Psi)`.
///
/// `psi_bar(kappa) = psi_bar_offset + psi_bar_slope * kappa`, and `Psi` is a
/// squared-exponential kernel in `kappa` with a relative diagonal nugget
/// `kernel_jitter * kernel_amplitude^2`. A zero `kernel_amplitude` fixes the
/// spectrum to its mean and decouples `eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumPrior {
    pub psi_bar_offset: f64,
    #[serde(default = "default_slope")]
    pub psi_bar_slope: f64,
    pub kernel_amplitude: f64,
    pub kernel_smoothness_scale: f64,
    #[serde(rename = "p0")]
    pub pivot_power: f64,
    pub zero_mode_std: f64,
    #[serde(default = "default_jitter")]
    pub kernel_jitter: f64,
    #[serde(default)]
    pub interpolation: SpectrumInterpolation,
}

fn default_slope() -> f64 {
    -2.0
}

fn default_jitter() -> f64 {
    1e-6
}

impl SpectrumPrior {
    pub fn new(
        psi_bar_offset: f64,
        psi_bar_slope: f64,
        kernel_amplitude: f64,
        kernel_smoothness_scale: f64,
        pivot_power: f64,
        zero_mode_std: f64,
    ) -> Self {
        Self {
            psi_bar_offset,
            psi_bar_slope,
            kernel_amplitude,
            kernel_smoothness_scale,
            pivot_power,
            zero_mode_std,
            kernel_jitter: default_jitter(),
            interpolation: SpectrumInterpolation::default(),
        }
    }

    /// Spectrum fixed at `psi_bar`; `eta` has no effect.
    pub fn fixed(psi_bar_offset: f64, psi_bar_slope: f64, pivot_power: f64, zero_mode_std: f64) -> Self {
        Self::new(psi_bar_offset, psi_bar_slope, 0.0, 1.0, pivot_power, zero_mode_std)
    }

    pub fn with_interpolation(mut self, interpolation: SpectrumInterpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.kernel_amplitude >= 0.0, "kernel_amplitude must be nonnegative"),
            (self.kernel_smoothness_scale > 0.0, "kernel_smoothness_scale must be positive"),
            (self.pivot_power > 0.0, "p0 must be positive"),
            (self.zero_mode_std > 0.0, "zero_mode_std must be positive"),
            (self.kernel_jitter >= 0.0, "kernel_jitter must be nonnegative"),
            (
                self.psi_bar_offset.is_finite() && self.psi_bar_slope.is_finite(),
                "psi_bar must be finite",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidParameter(msg.into()));
            }
        }
        Ok(())
    }

    pub fn psi_bar(&self, kappa: f64) -> f64 {
        self.psi_bar_offset + self.psi_bar_slope * kappa
    }

    /// Bin-level covariance `Psi` (row-major, including the nugget).
    pub fn kernel_matrix(&self, kappa: &[f64]) -> Vec<f64> {
        let n = kappa.len();
        let amp2 = self.kernel_amplitude * self.kernel_amplitude;
        let ell2 = self.kernel_smoothness_scale * self.kernel_smoothness_scale;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dk = kappa[i] - kappa[j];
                k[i * n + j] = amp2 * (-0.5 * dk * dk / ell2).exp();
            }
            k[i * n + i] += amp2 * self.kernel_jitter;
        }
        k
    }
}

/// `psi = psi_bar + A_psi eta` with `A_psi A_psi† = Psi`.
#[derive(Debug, Clone)]
pub struct AmplitudeModel<T> {
    mean: Vec<T>,
    factor: Vec<T>,
    n_bins: usize,
    fixed: bool,
}

impl<T: Real> AmplitudeModel<T> {
    pub fn new(prior: &SpectrumPrior, binning: &ModeBinning) -> Result<Self> {
        prior.validate()?;
        let kappa = binning.kappa_of_bin();
        let n = kappa.len();
        let mean = kappa.iter().map(|&k| T::lit(prior.psi_bar(k))).collect();
        let fixed = prior.kernel_amplitude == 0.0;
        let factor = if fixed {
            vec![T::zero(); n * n]
        } else {
            let kernel: Vec<T> = prior.kernel_matrix(kappa).into_iter().map(T::lit).collect();
            cholesky(&kernel, n).map_err(|_| {
                Error::InvalidParameter(
                    "spectrum kernel is not positive definite; increase kernel_jitter".into(),
                )
            })?
        };
        Ok(Self {
            mean,
            factor,
            n_bins: n,
            fixed,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Lower-triangular factor `A_psi`, row-major.
    pub fn factor(&self) -> &[T] {
        &self.factor
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed
    }

    pub fn apply_factor(&self, eta: &[T]) -> Vec<T> {
        let n = self.n_bins;
        (0..n)
            .map(|i| dot(&self.factor[i * n..i * n + i + 1], &eta[..=i]))
            .collect()
    }

    pub fn apply_factor_adjoint(&self, g: &[T]) -> Vec<T> {
        let n = self.n_bins;
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            for j in 0..=i {
                out[j] = out[j] + self.factor[i * n + j] * g[i];
            }
        }
        out
    }

    pub fn psi(&self, eta: &[T]) -> Vec<T> {
        self.apply_factor(eta)
            .into_iter()
            .zip(&self.mean)
            .map(|(c, &m)| m + c)
            .collect()
    }
}

/// Pointwise map from the Gaussian field to the signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointwiseNonlinearity {
    /// `s = s0 exp(phi)`
    Exponential { s0: f64 },
    /// `s = s0 / (1 + exp(-phi))`
    Sigmoid { s0: f64 },
    /// `s = phi`
    Identity,
}

impl PointwiseNonlinearity {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Exponential { s0 } | Self::Sigmoid { s0 } if !(s0 > 0.0 && s0.is_finite()) => {
                Err(Error::InvalidParameter(format!("s0 must be positive, got {s0}")))
            }
            _ => Ok(()),
        }
    }

    pub fn value<T: Real>(&self, phi: T) -> T {
        self.value_and_derivative(phi).0
    }

    pub fn derivative<T: Real>(&self, phi: T) -> T {
        self.value_and_derivative(phi).1
    }

    pub fn value_and_derivative<T: Real>(&self, phi: T) -> (T, T) {
        match *self {
            Self::Exponential { s0 } => {
                let s = T::lit(s0) * phi.exp();
                (s, s)
            }
            Self::Sigmoid { s0 } => {
                let s0 = T::lit(s0);
                // logistic evaluated without overflow on either side
                let (sig, one_minus) = if phi >= T::zero() {
                    let e = (-phi).exp();
                    (T::one() / (T::one() + e), e / (T::one() + e))
                } else {
                    let e = phi.exp();
                    (e / (T::one() + e), T::one() / (T::one() + e))
                };
                (s0 * sig, s0 * sig * one_minus)
            }
            Self::Identity => (phi, T::one()),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }
}

/// Straight chord through the domain, endpoints in physical coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chord {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl Chord {
    pub fn length(&self) -> f64 {
        self.start
            .iter()
            .zip(&self.end)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }
}

/// Linear instrument description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResponseSpec {
    /// Reads the signal at a list of distinct pixels.
    Mask { indices: Vec<usize> },
    /// Integrates the signal along chords with midpoint quadrature.
    LineOfSight {
        chords: Vec<Chord>,
        #[serde(default = "default_step_fraction")]
        step_fraction: f64,
    },
}

fn default_step_fraction() -> f64 {
    0.5
}

impl ResponseSpec {
    /// Every pixel observed directly.
    pub fn full_mask(grid: &Grid) -> Self {
        Self::Mask {
            indices: (0..grid.size()).collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Mask { indices } => indices.len(),
            Self::LineOfSight { chords, .. } => chords.len(),
        }
    }
}

/// `n` chords between uniformly drawn points of the domain.
pub fn random_chords(grid: &Grid, n: usize, seed: u64) -> Vec<Chord> {
    let extent = grid.extent();
    let mut r = rng::stream(seed, rng::stream_id(7, 0, 0));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let start: Vec<f64> = extent.iter().map(|&l| r.random::<f64>() * l).collect();
        let end: Vec<f64> = extent.iter().map(|&l| r.random::<f64>() * l).collect();
        let chord = Chord { start, end };
        if chord.length() > 0.0 {
            out.push(chord);
        }
    }
    out
}

/// Sparse linear response `R'`.
#[derive(Debug, Clone)]
pub struct Response<T> {
    rows: Vec<Vec<(usize, T)>>,
    n_pixels: usize,
    adjoint_sign: T,
}

impl<T: Real> Response<T> {
    pub fn new(spec: &ResponseSpec, grid: &Grid) -> Result<Self> {
        let n_pixels = grid.size();
        let rows = match spec {
            ResponseSpec::Mask { indices } => {
                let mut seen = vec![false; n_pixels];
                let mut rows = Vec::with_capacity(indices.len());
                for &i in indices {
                    if i >= n_pixels {
                        return Err(Error::InvalidParameter(format!(
                            "mask index {i} outside grid of {n_pixels} pixels"
                        )));
                    }
                    if std::mem::replace(&mut seen[i], true) {
                        return Err(Error::InvalidParameter(format!("duplicate mask index {i}")));
                    }
                    rows.push(vec![(i, T::one())]);
                }
                rows
            }
            ResponseSpec::LineOfSight { chords, step_fraction } => {
                if !(*step_fraction > 0.0 && *step_fraction <= 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "step_fraction must lie in (0, 1], got {step_fraction}"
                    )));
                }
                chords
                    .iter()
                    .enumerate()
                    .map(|(c, chord)| line_of_sight_row(grid, chord, *step_fraction, c))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Self {
            rows,
            n_pixels,
            adjoint_sign: T::one(),
        })
    }

    /// Copy whose adjoint is sign-flipped. Only meant for exercising
    /// consistency checks.
    pub fn with_broken_adjoint(mut self) -> Self {
        self.adjoint_sign = -T::one();
        self
    }

    pub fn rows(&self) -> &[Vec<(usize, T)>] {
        &self.rows
    }

    pub fn output_dim(&self) -> usize {
        self.rows.len()
    }

    /// Pixels touched by at least one measurement.
    pub fn coverage(&self) -> Vec<bool> {
        let mut hit = vec![false; self.n_pixels];
        for row in &self.rows {
            for &(p, w) in row {
                if w != T::zero() {
                    hit[p] = true;
                }
            }
        }
        hit
    }
}

fn line_of_sight_row<T: Real>(grid: &Grid, chord: &Chord, step_fraction: f64, index: usize) -> Result<Vec<(usize, T)>> {
    let extent = grid.extent();
    let ndim = grid.ndim();
    if chord.start.len() != ndim || chord.end.len() != ndim {
        return Err(Error::InvalidParameter(format!("chord {index} has wrong dimension")));
    }
    for p in [&chord.start, &chord.end] {
        if p.iter().zip(&extent).any(|(&x, &l)| !(x >= 0.0 && x <= l)) {
            return Err(Error::InvalidParameter(format!("chord {index} leaves the domain")));
        }
    }
    let length = chord.length();
    if length == 0.0 {
        return Err(Error::InvalidParameter(format!("chord {index} has zero length")));
    }
    let min_pixel = grid.pixel_size().iter().cloned().fold(f64::INFINITY, f64::min);
    let n_steps = (length / (step_fraction * min_pixel)).ceil().max(1.0) as usize;
    let step = length / n_steps as f64;
    let mut weights: BTreeMap<usize, f64> = BTreeMap::new();
    let mut point = vec![0.0; ndim];
    for j in 0..n_steps {
        let t = (j as f64 + 0.5) / n_steps as f64;
        for a in 0..ndim {
            point[a] = chord.start[a] + t * (chord.end[a] - chord.start[a]);
        }
        let pixel = grid
            .pixel_of_point(&point)
            .expect("midpoints of an in-domain chord stay in the domain");
        *weights.entry(pixel).or_insert(0.0) += step;
    }
    Ok(weights.into_iter().map(|(p, w)| (p, T::lit(w))).collect())
}

impl<T: Real> LinearOperator<T> for Response<T> {
    fn domain_dim(&self) -> usize {
        self.n_pixels
    }

    fn codomain_dim(&self) -> usize {
        self.rows.len()
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        self.rows
            .iter()
            .map(|row| row.iter().fold(T::zero(), |acc, &(p, w)| acc + w * v[p]))
            .collect()
    }

    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_pixels];
        for (row, &wi) in self.rows.iter().zip(w) {
            for &(p, weight) in row {
                out[p] = out[p] + self.adjoint_sign * weight * wi;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct ModeInterp<T> {
    lo: usize,
    hi: usize,
    weight: T,
}

fn mode_interpolation<T: Real>(binning: &ModeBinning, how: SpectrumInterpolation) -> Vec<Option<ModeInterp<T>>> {
    let centers = binning.kappa_of_bin();
    binning
        .bin_of_mode()
        .iter()
        .zip(binning.kappa_of_mode())
        .map(|(bin, &kappa)| {
            let bin = (*bin)?;
            Some(match how {
                SpectrumInterpolation::PiecewiseConstant => ModeInterp {
                    lo: bin,
                    hi: bin,
                    weight: T::zero(),
                },
                SpectrumInterpolation::Linear => {
                    let last = centers.len() - 1;
                    if kappa <= centers[0] {
                        ModeInterp { lo: 0, hi: 0, weight: T::zero() }
                    } else if kappa >= centers[last] {
                        ModeInterp { lo: last, hi: last, weight: T::zero() }
                    } else {
                        let hi = centers.partition_point(|&c| c <= kappa).min(last);
                        let lo = hi - 1;
                        let w = (kappa - centers[lo]) / (centers[hi] - centers[lo]);
                        ModeInterp { lo, hi, weight: T::lit(w) }
                    }
                }
            })
        })
        .collect()
}

/// Every intermediate of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub zeta: LatentVector<T>,
    /// Log-power per bin.
    pub psi: Vec<T>,
    /// `P_phi` per harmonic mode; the zero mode holds `zero_mode_std^2`.
    pub power: Vec<T>,
    /// `sqrt(P_phi)` per harmonic mode.
    pub amplitude: Vec<T>,
    pub phi: Field<T>,
    pub s: Field<T>,
    /// `ds/dphi` per pixel.
    pub s_derivative: Vec<T>,
    pub d_prime: Vec<T>,
}

/// The composed map `zeta -> d' = R'(s(phi(xi, psi(eta))))`.
#[derive(Debug, Clone)]
pub struct GenerativeModel<T: Real> {
    grid: Grid,
    binning: ModeBinning,
    spectrum_prior: SpectrumPrior,
    amplitude_model: AmplitudeModel<T>,
    interpolation: Vec<Option<ModeInterp<T>>>,
    nonlinearity: PointwiseNonlinearity,
    response_spec: ResponseSpec,
    response: Response<T>,
    transform: HarmonicTransform<T>,
}

impl<T: Real> GenerativeModel<T> {
    pub fn new(
        binning: ModeBinning,
        spectrum_prior: SpectrumPrior,
        nonlinearity: PointwiseNonlinearity,
        response_spec: ResponseSpec,
    ) -> Result<Self> {
        nonlinearity.validate()?;
        let grid = binning.grid().clone();
        let amplitude_model = AmplitudeModel::new(&spectrum_prior, &binning)?;
        let interpolation = mode_interpolation(&binning, spectrum_prior.interpolation);
        let response = Response::new(&response_spec, &grid)?;
        let transform = HarmonicTransform::new(&grid);
        Ok(Self {
            grid,
            binning,
            spectrum_prior,
            amplitude_model,
            interpolation,
            nonlinearity,
            response_spec,
            response,
            transform,
        })
    }

    /// Replaces the response adjoint with a sign-flipped one.
    pub fn with_broken_response_adjoint(mut self) -> Self {
        self.response = self.response.with_broken_adjoint();
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn binning(&self) -> &ModeBinning {
        &self.binning
    }

    pub fn spectrum_prior(&self) -> &SpectrumPrior {
        &self.spectrum_prior
    }

    pub fn amplitude_model(&self) -> &AmplitudeModel<T> {
        &self.amplitude_model
    }

    pub fn nonlinearity(&self) -> PointwiseNonlinearity {
        self.nonlinearity
    }

    pub fn response_spec(&self) -> &ResponseSpec {
        &self.response_spec
    }

    pub fn response(&self) -> &Response<T> {
        &self.response
    }

    pub fn transform(&self) -> &HarmonicTransform<T> {
        &self.transform
    }

    pub fn layout(&self) -> LatentLayout {
        LatentLayout {
            n_xi: self.grid.size() - 1,
            n_eta: self.binning.n_bins(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.layout().len()
    }

    pub fn data_dim(&self) -> usize {
        self.response.output_dim()
    }

    /// True when `d'` is linear in `zeta`.
    pub fn is_linear(&self) -> bool {
        self.nonlinearity.is_identity() && self.amplitude_model.is_fixed()
    }

    fn check_latent(&self, zeta: &LatentVector<T>) -> Result<()> {
        let layout = self.layout();
        if zeta.layout() != layout {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                got: zeta.len(),
                context: "latent vector blocks",
            });
        }
        Ok(())
    }

    /// `psi = psi_bar(kappa_bins) + A_psi eta`
    pub fn spectrum_forward(&self, eta: &[T]) -> Result<Vec<T>> {
        if eta.len() != self.amplitude_model.n_bins() {
            return Err(Error::DimensionMismatch {
                expected: self.amplitude_model.n_bins(),
                got: eta.len(),
                context: "spectrum excitations",
            });
        }
        Ok(self.amplitude_model.psi(eta))
    }

    fn check_psi(&self, psi: &[T]) -> Result<()> {
        if psi.len() != self.binning.n_bins() {
            return Err(Error::DimensionMismatch {
                expected: self.binning.n_bins(),
                got: psi.len(),
                context: "log-power spectrum",
            });
        }
        for (bin, &p) in psi.iter().enumerate() {
            if !p.is_finite() || p.abs() > T::lit(PSI_OVERFLOW_LIMIT) {
                return Err(Error::SpectrumOverflow {
                    bin,
                    value: p.to_f64_lossy(),
                    limit: PSI_OVERFLOW_LIMIT,
                });
            }
        }
        Ok(())
    }

    fn mode_log_power(&self, psi: &[T], mode: usize) -> Option<T> {
        self.interpolation[mode].map(|m| psi[m.lo] * (T::one() - m.weight) + psi[m.hi] * m.weight)
    }

    /// `P_phi(k) = P0 exp(psi(kappa(k)))` per mode; `zero_mode_std^2` at `k = 0`.
    pub fn power_from_psi(&self, psi: &[T]) -> Result<Vec<T>> {
        Ok(self.amplitude_from_psi(psi)?.into_iter().map(|a| a * a).collect())
    }

    fn amplitude_from_psi(&self, psi: &[T]) -> Result<Vec<T>> {
        self.check_psi(psi)?;
        let sqrt_p0 = T::lit(self.spectrum_prior.pivot_power.sqrt());
        let half = T::lit(0.5);
        Ok((0..self.grid.size())
            .map(|mode| match self.mode_log_power(psi, mode) {
                Some(lp) => sqrt_p0 * (lp * half).exp(),
                None => T::lit(self.spectrum_prior.zero_mode_std),
            })
            .collect())
    }

    fn full_excitation(&self, zeta: &LatentVector<T>) -> Vec<T> {
        let mut full = Vec::with_capacity(self.grid.size());
        full.push(zeta.xi_zero);
        full.extend_from_slice(&zeta.xi);
        full
    }

    /// Runs the full model and keeps every intermediate.
    pub fn forward(&self, zeta: &LatentVector<T>) -> Result<ForwardPass<T>> {
        self.check_latent(zeta)?;
        let psi = self.spectrum_forward(&zeta.eta)?;
        let amplitude = self.amplitude_from_psi(&psi)?;
        let power = amplitude.iter().map(|&a| a * a).collect();
        let u: Vec<T> = self
            .full_excitation(zeta)
            .into_iter()
            .zip(&amplitude)
            .map(|(x, &a)| x * a)
            .collect();
        let phi = self.transform.standardized_synthesis(&u);
        let (s_values, s_derivative): (Vec<T>, Vec<T>) = phi
            .values()
            .iter()
            .map(|&p| self.nonlinearity.value_and_derivative(p))
            .unzip();
        if !s_values.iter().chain(&s_derivative).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("signal nonlinearity"));
        }
        let s = Field::from_raw(self.grid.clone(), s_values);
        let d_prime = self.response.apply(s.values());
        Ok(ForwardPass {
            zeta: zeta.clone(),
            psi,
            power,
            amplitude,
            phi,
            s,
            s_derivative,
            d_prime,
        })
    }

    /// Tangent of `phi` for a latent tangent.
    fn phi_tangent(&self, pass: &ForwardPass<T>, tangent: &LatentVector<T>) -> Vec<T> {
        let dpsi = self.amplitude_model.apply_factor(&tangent.eta);
        let xi_full = self.full_excitation(&pass.zeta);
        let dxi_full = self.full_excitation(tangent);
        let half = T::lit(0.5);
        let du: Vec<T> = (0..self.grid.size())
            .map(|k| {
                let a = pass.amplitude[k];
                // d sqrt(P) = sqrt(P) dpsi / 2 on nonzero modes
                let da = self.mode_log_power(&dpsi, k).map_or(T::zero(), |d| a * d * half);
                a * dxi_full[k] + da * xi_full[k]
            })
            .collect();
        self.transform.standardized_synthesis(&du).into_values()
    }

    /// `J(zeta) v` for the map `zeta -> d'`.
    pub fn jvp(&self, pass: &ForwardPass<T>, tangent: &LatentVector<T>) -> Result<Vec<T>> {
        self.check_latent(tangent)?;
        let dphi = self.phi_tangent(pass, tangent);
        let ds: Vec<T> = dphi.iter().zip(&pass.s_derivative).map(|(&d, &g)| d * g).collect();
        Ok(self.response.apply(&ds))
    }

    /// `J(zeta)† w` for the map `zeta -> d'`.
    pub fn vjp(&self, pass: &ForwardPass<T>, cotangent: &[T]) -> Result<LatentVector<T>> {
        if cotangent.len() != self.data_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.data_dim(),
                got: cotangent.len(),
                context: "data-space cotangent",
            });
        }
        let gs = self.response.adjoint_apply(cotangent);
        let gphi: Vec<T> = gs.iter().zip(&pass.s_derivative).map(|(&g, &d)| g * d).collect();
        Ok(self.phi_cotangent(pass, &gphi))
    }

    /// Pulls a cotangent of `phi` back to the latent space.
    fn phi_cotangent(&self, pass: &ForwardPass<T>, gphi: &[T]) -> LatentVector<T> {
        let gu = self.transform.standardized_synthesis_adjoint(gphi);
        let xi_full = self.full_excitation(&pass.zeta);
        let half = T::lit(0.5);
        let mut gpsi = vec![T::zero(); self.binning.n_bins()];
        for k in 0..self.grid.size() {
            if let Some(m) = self.interpolation[k] {
                let g = gu[k] * xi_full[k] * pass.amplitude[k] * half;
                gpsi[m.lo] = gpsi[m.lo] + g * (T::one() - m.weight);
                gpsi[m.hi] = gpsi[m.hi] + g * m.weight;
            }
        }
        let eta = self.amplitude_model.apply_factor_adjoint(&gpsi);
        LatentVector {
            xi: (1..self.grid.size()).map(|k| gu[k] * pass.amplitude[k]).collect(),
            eta,
            xi_zero: gu[0] * pass.amplitude[0],
        }
    }

    /// Convenience: forward pass and Jacobian-vector product in one call.
    pub fn model_jvp(&self, zeta: &LatentVector<T>, tangent: &LatentVector<T>) -> Result<Vec<T>> {
        let pass = self.forward(zeta)?;
        self.jvp(&pass, tangent)
    }

    pub fn model_vjp(&self, zeta: &LatentVector<T>, cotangent: &[T]) -> Result<LatentVector<T>> {
        let pass = self.forward(zeta)?;
        self.vjp(&pass, cotangent)
    }

    /// Linearized field map `zeta -> phi` at a forward pass, as an operator
    /// on flat latent vectors.
    pub fn field_jacobian<'a>(&'a self, pass: &'a ForwardPass<T>) -> FieldJacobian<'a, T> {
        FieldJacobian { model: self, pass }
    }

    /// Linearized `zeta -> d'` as an operator on flat latent vectors.
    pub fn data_jacobian<'a>(&'a self, pass: &'a ForwardPass<T>) -> DataJacobian<'a, T> {
        DataJacobian { model: self, pass }
    }

    /// Prior draw of the latent vector from a seeded stream.
    pub fn sample_latent(&self, seed: u64, stream: u64) -> LatentVector<T> {
        let mut r = rng::stream(seed, stream);
        LatentVector::sample(self.layout(), &mut r)
    }
}

/// `d phi / d zeta` at a fixed point.
pub struct FieldJacobian<'a, T: Real> {
    model: &'a GenerativeModel<T>,
    pass: &'a ForwardPass<T>,
}

impl<T: Real> LinearOperator<T> for FieldJacobian<'_, T> {
    fn domain_dim(&self) -> usize {
        self.model.latent_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.model.grid.size()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        let t = LatentVector::from_flat(self.model.layout(), v).expect("latent length");
        self.model.phi_tangent(self.pass, &t)
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.model.phi_cotangent(self.pass, w).to_flat()
    }
}

/// `d d' / d zeta` at a fixed point.
pub struct DataJacobian<'a, T: Real> {
    model: &'a GenerativeModel<T>,
    pass: &'a ForwardPass<T>,
}

impl<T: Real> LinearOperator<T> for DataJacobian<'_, T> {
    fn domain_dim(&self) -> usize {
        self.model.latent_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.model.data_dim()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        let t = LatentVector::from_flat(self.model.layout(), v).expect("latent length");
        self.model.jvp(self.pass, &t).expect("checked dimensions")
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.model.vjp(self.pass, w).expect("checked dimensions").to_flat()
    }
}

/// Data map of a linear model as an owned operator on flat latents.
#[derive(Debug, Clone)]
pub struct LinearModelOperator<T: Real> {
    model: GenerativeModel<T>,
    pass: ForwardPass<T>,
}

impl<T: Real> LinearModelOperator<T> {
    /// Fails unless the model is linear, in which case `d'(zeta) = J zeta`.
    pub fn new(model: GenerativeModel<T>) -> Result<Self> {
        if !model.is_linear() {
            return Err(Error::InvalidParameter(
                "a linear operator needs the identity nonlinearity and a fixed spectrum".into(),
            ));
        }
        let pass = model.forward(&LatentVector::zeros(model.layout()))?;
        Ok(Self { model, pass })
    }

    pub fn model(&self) -> &GenerativeModel<T> {
        &self.model
    }
}

impl<T: Real> LinearOperator<T> for LinearModelOperator<T> {
    fn domain_dim(&self) -> usize {
        self.model.latent_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.model.data_dim()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        self.model.data_jacobian(&self.pass).apply(v)
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.model.data_jacobian(&self.pass).adjoint_apply(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_binning;
    use crate::linop::{adjoint_test, DenseOperator};

    fn model_1d(
        n: usize,
        prior: SpectrumPrior,
        nl: PointwiseNonlinearity,
        resp: Option<ResponseSpec>,
    ) -> GenerativeModel<f64> {
        let grid = Grid::new(vec![n], vec![1.0 / n as f64]).unwrap();
        let binning = build_binning(&grid, 2.0 * std::f64::consts::PI, 8).unwrap();
        let resp = resp.unwrap_or_else(|| ResponseSpec::full_mask(&grid));
        GenerativeModel::new(binning, prior, nl, resp).unwrap()
    }

    fn model_2d(nl: PointwiseNonlinearity, interp: SpectrumInterpolation) -> GenerativeModel<f64> {
        let grid = Grid::new(vec![8, 6], vec![0.125, 1.0 / 6.0]).unwrap();
        let binning = build_binning(&grid, 2.0 * std::f64::consts::PI, 6).unwrap();
        let chords = random_chords(&grid, 12, 5);
        let prior = SpectrumPrior::new(0.0, -3.0, 0.8, 0.7, 0.3, 0.5).with_interpolation(interp);
        GenerativeModel::new(binning, prior, nl, ResponseSpec::LineOfSight { chords, step_fraction: 0.3 }).unwrap()
    }

    fn default_prior() -> SpectrumPrior {
        SpectrumPrior::new(0.0, -2.0, 1.0, 1.0, 1.0, 0.5)
    }

    /// `Phi_xy = 1/(N V) sum_k P(k) cos(k.(x - y))`, computed directly.
    fn explicit_covariance(grid: &Grid, power: &[f64]) -> Vec<f64> {
        let n = grid.size();
        let mut c = vec![0.0; n * n];
        let norm = 1.0 / grid.total_volume();
        for x in 0..n {
            for y in 0..n {
                let px = grid.pixel_center(x);
                let py = grid.pixel_center(y);
                let mut acc = 0.0;
                for k in 0..n {
                    let kv = grid.k_vector(k);
                    let phase: f64 = kv.iter().zip(px.iter().zip(&py)).map(|(k, (a, b))| k * (a - b)).sum();
                    acc += power[k] * phase.cos();
                }
                c[x * n + y] = acc * norm;
            }
        }
        c
    }

    fn frob_rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn spectrum_forward_examples() {
        let m = model_1d(16, SpectrumPrior::new(0.0, -2.0, 1.0, 1.0, 1.0, 1.0), PointwiseNonlinearity::Identity, None);
        let kappa = m.binning().kappa_of_bin().to_vec();
        let psi = m.spectrum_forward(&vec![0.0; kappa.len()]).unwrap();
        for (p, k) in psi.iter().zip(&kappa) {
            assert_eq!(*p, -2.0 * k);
        }

        let tiny = model_1d(16, SpectrumPrior::new(0.3, -2.0, 1e-12, 1.0, 1.0, 1.0), PointwiseNonlinearity::Identity, None);
        let mut r = rng::stream(1, 1);
        let eta: Vec<f64> = rng::standard_normal_vec(&mut r, kappa.len());
        let a = tiny.spectrum_forward(&eta).unwrap();
        let b = tiny.spectrum_forward(&vec![0.0; kappa.len()]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10);
        }
        assert!(m.spectrum_forward(&[0.0]).is_err());
    }

    #[test]
    fn amplitude_factor_reproduces_kernel() {
        let m = model_2d(PointwiseNonlinearity::Identity, SpectrumInterpolation::PiecewiseConstant);
        let kernel = m.spectrum_prior().kernel_matrix(m.binning().kappa_of_bin());
        let l = m.amplitude_model().factor();
        let n = m.binning().n_bins();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v: f64 = (0..n).map(|k| l[i * n + k] * l[j * n + k]).sum();
                num += (v - kernel[i * n + j]).powi(2);
                den += kernel[i * n + j].powi(2);
            }
        }
        assert!((num / den).sqrt() <= 1e-8);
    }

    #[test]
    fn power_from_psi_examples() {
        let prior = SpectrumPrior::new(0.0, -2.0, 1.0, 1.0, 0.7, 0.5);
        let m = model_2d(PointwiseNonlinearity::Identity, SpectrumInterpolation::PiecewiseConstant);
        let nb = m.binning().n_bins();
        let p = m.power_from_psi(&vec![0.0; nb]).unwrap();
        let p0 = m.spectrum_prior().pivot_power;
        assert!((p[0] - 0.25).abs() < 1e-15);
        for &v in &p[1..] {
            assert!((v - p0).abs() < 1e-14);
        }
        let p = m.power_from_psi(&vec![2f64.ln(); nb]).unwrap();
        for &v in &p[1..] {
            assert!((v - 2.0 * p0).abs() < 1e-14);
        }
        let mut r = rng::stream(2, 0);
        let psi: Vec<f64> = rng::standard_normal_vec(&mut r, nb);
        let p = m.power_from_psi(&psi).unwrap();
        let bins = m.binning().bin_of_mode();
        for i in 1..p.len() {
            for j in 1..p.len() {
                if bins[i] == bins[j] {
                    assert_eq!(p[i], p[j]);
                }
            }
        }
        let mut bad = vec![0.0; nb];
        bad[1] = 61.0;
        assert!(matches!(m.power_from_psi(&bad), Err(Error::SpectrumOverflow { bin: 1, .. })));
        let _ = prior;
    }

    #[test]
    fn zero_latent_forward() {
        for nl in [
            PointwiseNonlinearity::Exponential { s0: 1.5 },
            PointwiseNonlinearity::Sigmoid { s0: 2.0 },
            PointwiseNonlinearity::Identity,
        ] {
            let m = model_2d(nl, SpectrumInterpolation::PiecewiseConstant);
            let pass = m.forward(&LatentVector::zeros(m.layout())).unwrap();
            assert!(pass.phi.values().iter().all(|&v| v == 0.0));
            let s0 = nl.value(0.0);
            assert!(pass.s.values().iter().all(|&v| v == s0));
            let expected = m.response().apply(pass.s.values());
            assert_eq!(pass.d_prime, expected);
        }
    }

    #[test]
    fn exponential_signal_is_positive() {
        let m = model_2d(PointwiseNonlinearity::Exponential { s0: 1.0 }, SpectrumInterpolation::Linear);
        for seed in 0..200 {
            let pass = m.forward(&m.sample_latent(seed, 0)).unwrap();
            assert!(pass.s.values().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn prior_covariance_matches_explicit_phi() {
        let m = model_1d(8, default_prior(), PointwiseNonlinearity::Identity, None);
        let nb = m.binning().n_bins();
        let mut eta_fixed = LatentVector::zeros(m.layout());
        eta_fixed.eta = vec![0.0; nb];
        let power = m.forward(&eta_fixed).unwrap().power;
        let phi_exact = explicit_covariance(m.grid(), &power);

        let n = 8;
        let draws = 10_000;
        let mut sum = vec![0.0; n];
        let mut cov = vec![0.0; n * n];
        for i in 0..draws {
            let mut z = m.sample_latent(11, i);
            z.eta = vec![0.0; nb];
            let phi = m.forward(&z).unwrap().phi.into_values();
            for x in 0..n {
                sum[x] += phi[x];
                for y in 0..n {
                    cov[x * n + y] += phi[x] * phi[y];
                }
            }
        }
        for c in &mut cov {
            *c /= draws as f64;
        }
        // mean within four standard errors per pixel
        for x in 0..n {
            let mean = sum[x] / draws as f64;
            let se = (phi_exact[x * n + x] / draws as f64).sqrt();
            assert!(mean.abs() <= 4.0 * se, "pixel {x}: mean {mean} se {se}");
        }
        assert!(frob_rel(&cov, &phi_exact) <= 0.05);

        // homogeneity: the covariance only depends on the separation
        let mut by_sep = vec![0.0; n];
        for x in 0..n {
            for y in 0..n {
                by_sep[(y + n - x) % n] += cov[x * n + y] / n as f64;
            }
        }
        let homog: Vec<f64> = (0..n * n).map(|i| by_sep[(i % n + n - i / n) % n]).collect();
        assert!(frob_rel(&cov, &homog) <= 0.05);
    }

    fn central_difference(m: &GenerativeModel<f64>, z: &LatentVector<f64>, v: &LatentVector<f64>, h: f64) -> Vec<f64> {
        let zf = z.to_flat();
        let vf = v.to_flat();
        let plus: Vec<f64> = zf.iter().zip(&vf).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = zf.iter().zip(&vf).map(|(a, b)| a - h * b).collect();
        let dp = m.forward(&LatentVector::from_flat(m.layout(), &plus).unwrap()).unwrap().d_prime;
        let dm = m.forward(&LatentVector::from_flat(m.layout(), &minus).unwrap()).unwrap().d_prime;
        dp.iter().zip(&dm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    #[test]
    fn jvp_matches_central_differences() {
        for interp in [SpectrumInterpolation::PiecewiseConstant, SpectrumInterpolation::Linear] {
            for nl in [PointwiseNonlinearity::Sigmoid { s0: 1.0 }, PointwiseNonlinearity::Exponential { s0: 0.5 }] {
                let m = model_2d(nl, interp);
                let mut worst: f64 = 0.0;
                for i in 0..100 {
                    let z = m.sample_latent(100, i);
                    let v = m.sample_latent(200, i);
                    let jv = m.model_jvp(&z, &v).unwrap();
                    let fd = central_difference(&m, &z, &v, 1e-4);
                    let num: f64 = jv.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
                    worst = worst.max(num / den);
                }
                assert!(worst <= 1e-5, "{nl:?} {interp:?}: {worst:e}");
            }
        }
    }

    #[test]
    fn jvp_vjp_duality() {
        for interp in [SpectrumInterpolation::PiecewiseConstant, SpectrumInterpolation::Linear] {
            let m = model_2d(PointwiseNonlinearity::Sigmoid { s0: 1.3 }, interp);
            for i in 0..20 {
                let z = m.sample_latent(7, i);
                let pass = m.forward(&z).unwrap();
                assert!(adjoint_test(&m.data_jacobian(&pass), 5, i) <= 1e-10);
                assert!(adjoint_test(&m.field_jacobian(&pass), 5, i) <= 1e-10);
            }
            let z = m.sample_latent(7, 0);
            let zero = m.model_vjp(&z, &vec![0.0; m.data_dim()]).unwrap();
            assert_eq!(zero.norm_sqr(), 0.0);
            let zero = m.model_jvp(&z, &LatentVector::zeros(m.layout())).unwrap();
            assert!(zero.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_model_has_constant_jacobian() {
        let grid = Grid::new(vec![8], vec![0.125]).unwrap();
        let mask = ResponseSpec::Mask { indices: vec![0, 2, 3, 6] };
        let m = model_1d(8, SpectrumPrior::fixed(0.0, -2.0, 1.0, 0.5), PointwiseNonlinearity::Identity, Some(mask));
        assert!(m.is_linear());
        let v = m.sample_latent(3, 3);
        let reference = m.model_jvp(&LatentVector::zeros(m.layout()), &v).unwrap();
        for i in 0..10 {
            let z = m.sample_latent(4, i);
            let jv = m.model_jvp(&z, &v).unwrap();
            for (a, b) in jv.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let _ = grid;
    }

    #[test]
    fn masked_vjp_on_four_pixels() {
        let mask = ResponseSpec::Mask { indices: vec![1, 3] };
        let m = model_1d(4, SpectrumPrior::fixed(0.0, -2.0, 1.0, 0.5), PointwiseNonlinearity::Identity, Some(mask));
        let z = m.sample_latent(9, 0);
        let pass = m.forward(&z).unwrap();
        let jac = DenseOperator::from_operator(&m.data_jacobian(&pass));
        let w = vec![0.7, -1.1];
        let vjp = m.vjp(&pass, &w).unwrap();
        let dense = jac.adjoint_apply(&w);
        for (a, b) in vjp.to_flat().iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
        // fixed spectrum: nothing flows into eta
        assert!(vjp.eta.iter().all(|&g| g == 0.0));
        // the signal cotangent vanishes on unobserved pixels
        let gs = m.response().adjoint_apply(&w);
        assert_eq!(gs[0], 0.0);
        assert_eq!(gs[2], 0.0);
        // and the dense Jacobian has no eta columns
        for row in 0..2 {
            for col in m.layout().n_xi..m.layout().n_xi + m.layout().n_eta {
                assert_eq!(jac.get(row, col), 0.0);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = model_2d(PointwiseNonlinearity::Sigmoid { s0: 1.0 }, SpectrumInterpolation::Linear);
        let z = m.sample_latent(5, 5);
        let a = m.forward(&z).unwrap().d_prime;
        let b = m.forward(&z).unwrap().d_prime;
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn response_linearity_and_adjoint() {
        let grid = Grid::new(vec![10, 7], vec![0.1, 1.0 / 7.0]).unwrap();
        let specs = [
            ResponseSpec::Mask { indices: vec![0, 5, 17, 69, 33] },
            ResponseSpec::LineOfSight { chords: random_chords(&grid, 20, 3), step_fraction: 0.25 },
        ];
        for spec in &specs {
            let r = Response::<f64>::new(spec, &grid).unwrap();
            assert_eq!(r.output_dim(), spec.output_dim());
            assert!(adjoint_test(&r, 20, 1) <= 1e-12);
            let mut g = rng::stream(8, 8);
            let s1: Vec<f64> = rng::standard_normal_vec(&mut g, grid.size());
            let s2: Vec<f64> = rng::standard_normal_vec(&mut g, grid.size());
            let (a, b) = (1.7, -0.4);
            let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
            let lhs = r.apply(&mix);
            let rhs: Vec<f64> = r.apply(&s1).iter().zip(r.apply(&s2)).map(|(x, y)| a * x + b * y).collect();
            for (x, y) in lhs.iter().zip(&rhs) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn line_of_sight_integrates_length() {
        let grid = Grid::new(vec![16, 16], vec![1.0 / 16.0; 2]).unwrap();
        let chord = Chord { start: vec![0.1, 0.2], end: vec![0.9, 0.75] };
        let len = chord.length();
        let r = Response::<f64>::new(&ResponseSpec::LineOfSight { chords: vec![chord], step_fraction: 0.5 }, &grid).unwrap();
        let ones = vec![1.0; grid.size()];
        assert!((r.apply(&ones)[0] - len).abs() < 1e-12);
    }

    #[test]
    fn response_validation() {
        let grid = Grid::new(vec![4, 4], vec![0.25, 0.25]).unwrap();
        assert!(Response::<f64>::new(&ResponseSpec::Mask { indices: vec![16] }, &grid).is_err());
        assert!(Response::<f64>::new(&ResponseSpec::Mask { indices: vec![1, 1] }, &grid).is_err());
        let outside = Chord { start: vec![0.0, 0.0], end: vec![1.5, 0.5] };
        assert!(Response::<f64>::new(&ResponseSpec::LineOfSight { chords: vec![outside], step_fraction: 0.5 }, &grid).is_err());
    }

    #[test]
    fn nonlinearity_is_finite_and_consistent() {
        let sig = PointwiseNonlinearity::Sigmoid { s0: 2.0 };
        for &x in &[-800.0f64, -30.0, -1.0, 0.0, 0.5, 40.0, 800.0] {
            let (v, d) = sig.value_and_derivative(x);
            assert!(v.is_finite() && d.is_finite());
            let h = 1e-6;
            if x.abs() < 50.0 {
                let fd = (sig.value(x + h) - sig.value(x - h)) / (2.0 * h);
                assert!((fd - d).abs() < 1e-8);
            }
        }
        assert_eq!(sig.value(0.0), 1.0);
        let exp = PointwiseNonlinearity::Exponential { s0: 3.0 };
        assert_eq!(exp.value(0.0), 3.0);
        assert!(PointwiseNonlinearity::Sigmoid { s0: 0.0 }.validate().is_err());
    }

    #[test]
    fn f32_forward_runs() {
        let grid = Grid::new(vec![8, 8], vec![0.125; 2]).unwrap();
        let binning = build_binning(&grid, 1.0, 5).unwrap();
        let m = GenerativeModel::<f32>::new(
            binning,
            default_prior(),
            PointwiseNonlinearity::Sigmoid { s0: 1.0 },
            ResponseSpec::full_mask(&grid),
        )
        .unwrap();
        let pass = m.forward(&m.sample_latent(1, 1)).unwrap();
        assert!(pass.s.values().iter().all(|v| v.is_finite()));
        assert!(adjoint_test(&m.data_jacobian(&pass), 5, 1) <= 1e-4);
    }
}

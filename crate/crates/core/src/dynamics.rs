//! Spectral Green's functions of linear stochastic field dynamics.
//!
//! Response spectra are evaluated directly on the discrete `(ω, k)`
//! lattice of a periodic space-time grid whose first axis is time.

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, HarmonicField, HarmonicTransform};
use crate::rng;
use crate::scalar::Real;

/// Denominators closer to zero than this count as poles.
pub const POLE_TOLERANCE: f64 = 1e-12;
/// Minimum admissible `|1 + iω - Fw f'|` for a neural field kernel.
pub const NEURAL_MIN_MODULUS: f64 = 1e-8;
const PURPOSE_DYNAMICS: u32 = 6;

/// Spatial grid extended by a periodic time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeGrid {
    space: Grid,
    n_t: usize,
    dt: f64,
    grid: Grid,
}

impl SpaceTimeGrid {
    pub fn new(space: Grid, n_t: usize, dt: f64) -> Result<Self> {
        let mut shape = vec![n_t];
        shape.extend_from_slice(space.shape());
        let mut pixel = vec![dt];
        pixel.extend_from_slice(space.pixel_size());
        let grid = Grid::new(shape, pixel)?;
        Ok(Self { space, n_t, dt, grid })
    }

    pub fn space(&self) -> &Grid {
        &self.space
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Combined grid with time as axis 0.
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `(ω, |k|)` of a flat mode index.
    pub fn frequencies(&self, mode: usize) -> (f64, f64) {
        let kv = self.grid.k_vector(mode);
        let k = kv[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
        (kv[0], k)
    }
}

/// Damped wave equation `(∂t² + damping ∂t - c² ∇²) φ = ξ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveKernel {
    pub c: f64,
    pub damping: f64,
}

impl WaveKernel {
    pub fn new(c: f64, damping: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("wave speed must be positive, got {c}")));
        }
        if !(damping > 0.0 && damping.is_finite()) {
            return Err(Error::InvalidParameter(format!("damping must be positive, got {damping}")));
        }
        Ok(Self { c, damping })
    }

    fn denominator(&self, omega: f64, k: f64) -> Complex<f64> {
        Complex::new(omega * omega - self.c * self.c * k * k, -self.damping * omega)
    }
}

/// Linearized neural field with a tabulated coupling spectrum `Fw(ω, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralFieldKernel {
    w_spectrum: Vec<Complex<f64>>,
    f_prime: f64,
}

impl NeuralFieldKernel {
    /// `w_spectrum` holds one value per mode of `stgrid` in flat order.
    pub fn new(w_spectrum: Vec<Complex<f64>>, f_prime: f64, stgrid: &SpaceTimeGrid) -> Result<Self> {
        if w_spectrum.len() != stgrid.grid().size() {
            return Err(Error::DimensionMismatch {
                expected: stgrid.grid().size(),
                got: w_spectrum.len(),
                context: "coupling spectrum",
            });
        }
        if !f_prime.is_finite() {
            return Err(Error::InvalidParameter("activation slope must be finite".into()));
        }
        let kernel = Self { w_spectrum, f_prime };
        for mode in 0..stgrid.grid().size() {
            let modulus = kernel.denominator(stgrid, mode).norm();
            if !(modulus > NEURAL_MIN_MODULUS) {
                return Err(Error::SpectralPole {
                    mode: stgrid.grid().mode_frequencies(mode),
                    modulus,
                });
            }
        }
        Ok(kernel)
    }

    /// Coupling that does not depend on the mode.
    pub fn uniform(w: Complex<f64>, f_prime: f64, stgrid: &SpaceTimeGrid) -> Result<Self> {
        Self::new(vec![w; stgrid.grid().size()], f_prime, stgrid)
    }

    pub fn f_prime(&self) -> f64 {
        self.f_prime
    }

    pub fn w_spectrum(&self) -> &[Complex<f64>] {
        &self.w_spectrum
    }

    fn denominator(&self, stgrid: &SpaceTimeGrid, mode: usize) -> Complex<f64> {
        let (omega, _) = stgrid.frequencies(mode);
        Complex::new(1.0, omega) - self.w_spectrum[mode] * self.f_prime
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsKernel {
    Wave(WaveKernel),
    Neural(NeuralFieldKernel),
}

/// Complex response spectrum on every lattice mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSpectrum<T> {
    pub values: Vec<Complex<T>>,
    /// Set when the `(ω, k) = (0, 0)` pole was excluded and zeroed.
    pub zero_mode_excluded: bool,
}

/// `P_G(ω, k) = (ω² - i damping ω - c² k²)^-1`; the static zero mode is set
/// to zero and flagged.
pub fn wave_response_spectrum<T: Real>(kernel: &WaveKernel, stgrid: &SpaceTimeGrid) -> Result<ResponseSpectrum<T>> {
    let grid = stgrid.grid();
    let mut values = Vec::with_capacity(grid.size());
    let mut zero_mode_excluded = false;
    for mode in 0..grid.size() {
        let (omega, k) = stgrid.frequencies(mode);
        let den = kernel.denominator(omega, k);
        if den.norm() < POLE_TOLERANCE {
            if mode == 0 {
                zero_mode_excluded = true;
                values.push(Complex::new(T::zero(), T::zero()));
                continue;
            }
            return Err(Error::SpectralPole {
                mode: grid.mode_frequencies(mode),
                modulus: den.norm(),
            });
        }
        let g = den.inv();
        values.push(Complex::new(T::lit(g.re), T::lit(g.im)));
    }
    Ok(ResponseSpectrum {
        values,
        zero_mode_excluded,
    })
}

/// `P_φ(ω, k) = 1 / ((ω² - c² k²)² + damping² ω²)`, zero at the excluded
/// static mode.
pub fn wave_power_spectrum<T: Real>(kernel: &WaveKernel, stgrid: &SpaceTimeGrid) -> Result<Vec<T>> {
    let response = wave_response_spectrum::<f64>(kernel, stgrid)?;
    Ok((0..stgrid.grid().size())
        .map(|mode| {
            if mode == 0 && response.zero_mode_excluded {
                return T::zero();
            }
            let (omega, k) = stgrid.frequencies(mode);
            let a = omega * omega - kernel.c * kernel.c * k * k;
            let b = kernel.damping * omega;
            T::lit(1.0 / (a * a + b * b))
        })
        .collect())
}

/// `(1 + iω - Fw f')^-1` per mode.
pub fn neural_response_spectrum<T: Real>(kernel: &NeuralFieldKernel, stgrid: &SpaceTimeGrid) -> Result<Vec<Complex<T>>> {
    if kernel.w_spectrum.len() != stgrid.grid().size() {
        return Err(Error::DimensionMismatch {
            expected: stgrid.grid().size(),
            got: kernel.w_spectrum.len(),
            context: "coupling spectrum",
        });
    }
    (0..stgrid.grid().size())
        .map(|mode| {
            let den = kernel.denominator(stgrid, mode);
            if !(den.norm() > NEURAL_MIN_MODULUS) {
                return Err(Error::SpectralPole {
                    mode: stgrid.grid().mode_frequencies(mode),
                    modulus: den.norm(),
                });
            }
            let g = den.inv();
            Ok(Complex::new(T::lit(g.re), T::lit(g.im)))
        })
        .collect()
}

/// Response spectrum of either kernel.
pub fn response_spectrum<T: Real>(kernel: &DynamicsKernel, stgrid: &SpaceTimeGrid) -> Result<ResponseSpectrum<T>> {
    match kernel {
        DynamicsKernel::Wave(w) => wave_response_spectrum(w, stgrid),
        DynamicsKernel::Neural(n) => Ok(ResponseSpectrum {
            values: neural_response_spectrum(n, stgrid)?,
            zero_mode_excluded: false,
        }),
    }
}

/// Source of the driving noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Excitation {
    /// Unit white noise; each `realization` is an independent stream.
    White { seed: u64, realization: u32 },
    /// `ξ = 0`
    Zero,
}

/// `φ = g * ξ`: white noise with `⟨ξ̃ ξ̃*⟩ = N V` is filtered by the response
/// spectrum and transformed back.
///
/// The filter is symmetrized as `(G(k) + conj G(-k)) / 2`, which leaves every
/// mode unchanged except self-conjugate Nyquist modes, where it keeps the real
/// part so the output stays real.
pub fn simulate_stochastic_field<T: Real>(
    kernel: &DynamicsKernel,
    stgrid: &SpaceTimeGrid,
    excitation: Excitation,
) -> Result<Field<T>> {
    let grid = stgrid.grid();
    let response = response_spectrum::<T>(kernel, stgrid)?;
    let transform = HarmonicTransform::new(grid);
    let spectrum = filtered_spectrum(&transform, &response, excitation_field(grid, excitation))?;
    transform.inverse(&spectrum)
}

fn excitation_field<T: Real>(grid: &Grid, excitation: Excitation) -> Field<T> {
    match excitation {
        Excitation::White { seed, realization } => {
            let mut r = rng::stream(seed, rng::stream_id(PURPOSE_DYNAMICS, 0, realization));
            let scale = T::lit(1.0 / grid.volume_element().sqrt());
            let values = rng::standard_normal_vec::<T, _>(&mut r, grid.size())
                .into_iter()
                .map(|x| x * scale)
                .collect();
            Field::new(grid.clone(), values).expect("excitation matches grid")
        }
        Excitation::Zero => Field::zeros(grid.clone()),
    }
}

/// Periodogram averaged over `realizations` independent simulations.
pub fn mean_periodogram<T: Real>(
    kernel: &DynamicsKernel,
    stgrid: &SpaceTimeGrid,
    seed: u64,
    realizations: u32,
) -> Result<Vec<T>> {
    if realizations == 0 {
        return Err(Error::InvalidParameter("at least one realization is needed".into()));
    }
    let grid = stgrid.grid();
    let response = response_spectrum::<T>(kernel, stgrid)?;
    let transform = HarmonicTransform::new(grid);
    let scale = T::lit(1.0 / (grid.total_volume() * realizations as f64));
    let per_run: Vec<Vec<T>> = (0..realizations)
        .into_par_iter()
        .map(|i| {
            let noise = excitation_field(grid, Excitation::White { seed, realization: i });
            let spectrum = filtered_spectrum(&transform, &response, noise)?;
            Ok(spectrum.values().iter().map(|c| c.norm_sqr()).collect())
        })
        .collect::<Result<_>>()?;
    let mut total = vec![T::zero(); grid.size()];
    for run in &per_run {
        for (t, &v) in total.iter_mut().zip(run) {
            *t = *t + v;
        }
    }
    Ok(total.into_iter().map(|v| v * scale).collect())
}

/// Ratio statistics of an empirical spectrum against a model in one
/// rectangular `(|ω|, |k|)` bin.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumBin {
    pub omega_range: (f64, f64),
    pub k_range: (f64, f64),
    pub modes: usize,
    /// Mean of `empirical / analytic` over the modes of the bin.
    pub mean_ratio: f64,
    pub mean_analytic: f64,
    pub mean_empirical: f64,
}

/// Compares two per-mode spectra on an `n_omega x n_k` grid of equal-width
/// bins. Modes with a zero model value and self-conjugate modes (whose
/// symmetrized filter differs from the model) are skipped.
pub fn compare_binned(
    stgrid: &SpaceTimeGrid,
    empirical: &[f64],
    analytic: &[f64],
    n_omega: usize,
    n_k: usize,
) -> Result<Vec<SpectrumBin>> {
    let grid = stgrid.grid();
    for v in [empirical, analytic] {
        if v.len() != grid.size() {
            return Err(Error::DimensionMismatch {
                expected: grid.size(),
                got: v.len(),
                context: "per-mode spectrum",
            });
        }
    }
    if n_omega == 0 || n_k == 0 {
        return Err(Error::InvalidParameter("bin counts must be positive".into()));
    }
    let freqs: Vec<(f64, f64)> = (0..grid.size())
        .map(|m| {
            let (w, k) = stgrid.frequencies(m);
            (w.abs(), k)
        })
        .collect();
    let w_max = freqs.iter().map(|f| f.0).fold(0.0, f64::max);
    let k_max = freqs.iter().map(|f| f.1).fold(0.0, f64::max);
    let locate = |x: f64, max: f64, n: usize| {
        if max > 0.0 {
            ((x / max * n as f64) as usize).min(n - 1)
        } else {
            0
        }
    };
    let mut sums = vec![(0usize, 0.0, 0.0, 0.0); n_omega * n_k];
    for (m, &(w, k)) in freqs.iter().enumerate() {
        if analytic[m] <= 0.0 || grid.negated_mode(m) == m {
            continue;
        }
        let b = locate(w, w_max, n_omega) * n_k + locate(k, k_max, n_k);
        let s = &mut sums[b];
        s.0 += 1;
        s.1 += empirical[m] / analytic[m];
        s.2 += analytic[m];
        s.3 += empirical[m];
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (n, ratio, a, e))| {
            let (i, j) = (b / n_k, b % n_k);
            let nf = n.max(1) as f64;
            SpectrumBin {
                omega_range: (w_max * i as f64 / n_omega as f64, w_max * (i + 1) as f64 / n_omega as f64),
                k_range: (k_max * j as f64 / n_k as f64, k_max * (j + 1) as f64 / n_k as f64),
                modes: n,
                mean_ratio: ratio / nf,
                mean_analytic: a / nf,
                mean_empirical: e / nf,
            }
        })
        .collect())
}

fn filtered_spectrum<T: Real>(
    transform: &HarmonicTransform<T>,
    response: &ResponseSpectrum<T>,
    noise: Field<T>,
) -> Result<HarmonicField<T>> {
    let grid = transform.grid().clone();
    let mut spectrum = transform.forward(&noise)?;
    let half = T::lit(0.5);
    let g = &response.values;
    for (mode, c) in spectrum.values_mut().iter_mut().enumerate() {
        let neg = grid.negated_mode(mode);
        let filter = (g[mode] + g[neg].conj()) * half;
        *c = *c * filter;
    }
    Ok(spectrum)
}

/// `|φ̃|² / (N V)` per mode.
pub fn periodogram<T: Real>(field: &Field<T>) -> Result<Vec<T>> {
    let grid = field.grid();
    let transform = HarmonicTransform::new(grid);
    let scale = T::lit(1.0 / grid.total_volume());
    Ok(transform
        .forward(field)?
        .values()
        .iter()
        .map(|c| c.norm_sqr() * scale)
        .collect())
}

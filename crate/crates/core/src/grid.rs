//! Periodic regular grids, real fields, the harmonic transform and isotropic
//! mode binning.
//!
//! Transform convention: the forward transform carries the volume element,
//! `f~(k) = V sum_x exp(-i k.x) f(x)`, and the inverse carries `1 / (N V)`.
//! With this choice discrete spectra approach their continuum counterparts
//! under grid refinement and Parseval reads
//! `V sum_x f(x)^2 = 1/(N V) sum_k |f~(k)|^2`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Relative tolerance used when checking Hermitian symmetry of harmonic input.
pub const HERMITIAN_TOLERANCE: f64 = 1e-10;

/// Rectangular periodic lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    pixel_size: Vec<f64>,
    volume_element: f64,
}

impl Grid {
    pub fn new(shape: Vec<usize>, pixel_size: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one axis".into()));
        }
        if shape.len() != pixel_size.len() {
            return Err(Error::InvalidGrid(format!(
                "{} axes but {} pixel sizes",
                shape.len(),
                pixel_size.len()
            )));
        }
        if let Some(axis) = shape.iter().position(|&n| n == 0) {
            return Err(Error::InvalidGrid(format!("axis {axis} has zero pixels")));
        }
        if let Some(axis) = pixel_size.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "axis {axis} has non-positive pixel size {}",
                pixel_size[axis]
            )));
        }
        let volume_element = pixel_size.iter().product();
        Ok(Self {
            shape,
            pixel_size,
            volume_element,
        })
    }

    /// Grid covering `[0, extent_j)` on each axis.
    pub fn with_extent(shape: Vec<usize>, extent: &[f64]) -> Result<Self> {
        if shape.len() != extent.len() {
            return Err(Error::InvalidGrid("shape and extent lengths differ".into()));
        }
        let pixel_size = shape
            .iter()
            .zip(extent)
            .map(|(&n, &l)| l / n.max(1) as f64)
            .collect();
        Self::new(shape, pixel_size)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn pixel_size(&self) -> &[f64] {
        &self.pixel_size
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn volume_element(&self) -> f64 {
        self.volume_element
    }

    /// Total volume `N * V`.
    pub fn total_volume(&self) -> f64 {
        self.size() as f64 * self.volume_element
    }

    pub fn extent(&self) -> Vec<f64> {
        self.shape
            .iter()
            .zip(&self.pixel_size)
            .map(|(&n, &d)| n as f64 * d)
            .collect()
    }

    /// Row-major multi-index of a flat index.
    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.ndim()];
        for axis in (0..self.ndim()).rev() {
            out[axis] = index % self.shape[axis];
            index /= self.shape[axis];
        }
        out
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + (i % n))
    }

    /// Signed integer frequencies of a harmonic mode (`q` with `k = 2 pi q / L`).
    pub fn mode_frequencies(&self, index: usize) -> Vec<i64> {
        self.unravel(index)
            .into_iter()
            .zip(&self.shape)
            .map(|(i, &n)| signed_frequency(i, n))
            .collect()
    }

    /// Wave vector of a harmonic mode in inverse length units.
    pub fn k_vector(&self, index: usize) -> Vec<f64> {
        self.mode_frequencies(index)
            .into_iter()
            .zip(self.extent())
            .map(|(q, l)| 2.0 * PI * q as f64 / l)
            .collect()
    }

    pub fn k_length(&self, index: usize) -> f64 {
        self.k_vector(index).iter().map(|k| k * k).sum::<f64>().sqrt()
    }

    /// Lengths `|k|` of every harmonic mode, in flat order.
    pub fn k_lengths(&self) -> Vec<f64> {
        (0..self.size()).map(|i| self.k_length(i)).collect()
    }

    /// Flat index of the mode `-k`.
    pub fn negated_mode(&self, index: usize) -> usize {
        let neg: Vec<usize> = self
            .unravel(index)
            .into_iter()
            .zip(&self.shape)
            .map(|(i, &n)| (n - i) % n)
            .collect();
        self.ravel(&neg)
    }

    /// Table of `-k` indices for every mode.
    pub fn negation_table(&self) -> Vec<usize> {
        (0..self.size()).map(|i| self.negated_mode(i)).collect()
    }

    /// Physical coordinate of the center of a pixel.
    pub fn pixel_center(&self, index: usize) -> Vec<f64> {
        self.unravel(index)
            .into_iter()
            .zip(&self.pixel_size)
            .map(|(i, &d)| (i as f64 + 0.5) * d)
            .collect()
    }

    /// Pixel containing a physical point, or `None` outside `[0, extent)`.
    pub fn pixel_of_point(&self, point: &[f64]) -> Option<usize> {
        if point.len() != self.ndim() {
            return None;
        }
        let mut multi = Vec::with_capacity(self.ndim());
        for ((&x, &d), &n) in point.iter().zip(&self.pixel_size).zip(&self.shape) {
            if !(x >= 0.0) || x > n as f64 * d {
                return None;
            }
            multi.push(((x / d).floor() as usize).min(n - 1));
        }
        Some(self.ravel(&multi))
    }
}

fn signed_frequency(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Real scalar field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    grid: Grid,
    values: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn new(grid: Grid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.size() {
            return Err(Error::DimensionMismatch {
                expected: grid.size(),
                got: values.len(),
                context: "field values",
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field values"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let values = vec![T::zero(); grid.size()];
        Self { grid, values }
    }

    pub fn constant(grid: Grid, c: T) -> Self {
        let values = vec![c; grid.size()];
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: Grid, values: Vec<T>) -> Self {
        debug_assert_eq!(grid.size(), values.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    /// Position-space inner product `V sum_x f(x) g(x)`.
    pub fn inner(&self, other: &Field<T>) -> T {
        let sum = self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        sum * T::lit(self.grid.volume_element)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Field<T> {
        Field::from_raw(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Fourier coefficients of a real field, stored on the full mode lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicField<T> {
    grid: Grid,
    values: Vec<Complex<T>>,
}

impl<T: Real> HarmonicField<T> {
    pub fn new(grid: Grid, values: Vec<Complex<T>>) -> Result<Self> {
        if values.len() != grid.size() {
            return Err(Error::DimensionMismatch {
                expected: grid.size(),
                got: values.len(),
                context: "harmonic field values",
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let values = vec![Complex::new(T::zero(), T::zero()); grid.size()];
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.values
    }

    /// Largest `|c(k) - conj(c(-k))|` relative to the largest coefficient modulus.
    pub fn hermitian_deviation(&self) -> f64 {
        let scale = self
            .values
            .iter()
            .map(|c| c.norm().to_f64_lossy())
            .fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        let worst = (0..self.values.len())
            .map(|i| {
                let j = self.grid.negated_mode(i);
                (self.values[i] - self.values[j].conj()).norm().to_f64_lossy()
            })
            .fold(0.0, f64::max);
        worst / scale
    }

    /// Mode-space inner product `1/(N V) sum_k Re(conj(a_k) b_k)`.
    pub fn inner(&self, other: &HarmonicField<T>) -> T {
        let sum = self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (a, b)| acc + (a.conj() * b).re);
        sum / T::lit(self.grid.total_volume())
    }
}

/// Planned n-dimensional FFT for one grid.
#[derive(Clone)]
pub struct HarmonicTransform<T: Real> {
    grid: Grid,
    forward: Vec<Arc<dyn Fft<T>>>,
    inverse: Vec<Arc<dyn Fft<T>>>,
}

impl<T: Real> std::fmt::Debug for HarmonicTransform<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HarmonicTransform")
            .field("grid", &self.grid)
            .finish_non_exhaustive()
    }
}

impl<T: Real> HarmonicTransform<T> {
    pub fn new(grid: &Grid) -> Self {
        let mut planner = FftPlanner::new();
        let forward = grid.shape().iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = grid.shape().iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            grid: grid.clone(),
            forward,
            inverse,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Unnormalized in-place transform along every axis.
    fn transform_in_place(&self, data: &mut [Complex<T>], inverse: bool) {
        let plans = if inverse { &self.inverse } else { &self.forward };
        let shape = self.grid.shape();
        let total = data.len();
        let mut lines: Vec<Complex<T>> = Vec::new();
        for (axis, plan) in plans.iter().enumerate() {
            let n = shape[axis];
            if n == 1 {
                continue;
            }
            let stride: usize = shape[axis + 1..].iter().product();
            if stride == 1 {
                plan.process(data);
                continue;
            }
            let block = n * stride;
            lines.clear();
            lines.reserve(total);
            for base in (0..total).step_by(block) {
                for inner in 0..stride {
                    lines.extend((0..n).map(|j| data[base + inner + j * stride]));
                }
            }
            plan.process(&mut lines);
            let mut line = 0;
            for base in (0..total).step_by(block) {
                for inner in 0..stride {
                    for j in 0..n {
                        data[base + inner + j * stride] = lines[line * n + j];
                    }
                    line += 1;
                }
            }
        }
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        if grid != &self.grid {
            return Err(Error::InvalidGrid("transform planned for a different grid".into()));
        }
        Ok(())
    }

    pub fn forward(&self, f: &Field<T>) -> Result<HarmonicField<T>> {
        self.check_grid(f.grid())?;
        let mut data: Vec<Complex<T>> =
            f.values().iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform_in_place(&mut data, false);
        let vol = T::lit(self.grid.volume_element());
        for c in &mut data {
            *c = *c * vol;
        }
        Ok(HarmonicField {
            grid: self.grid.clone(),
            values: data,
        })
    }

    pub fn inverse(&self, h: &HarmonicField<T>) -> Result<Field<T>> {
        self.check_grid(h.grid())?;
        let deviation = h.hermitian_deviation();
        if deviation > HERMITIAN_TOLERANCE {
            return Err(Error::NonHermitian { deviation });
        }
        Ok(self.inverse_unchecked(h.values()))
    }

    pub(crate) fn inverse_unchecked(&self, coefficients: &[Complex<T>]) -> Field<T> {
        let mut data = coefficients.to_vec();
        self.transform_in_place(&mut data, true);
        let scale = T::one() / T::lit(self.grid.total_volume());
        let values = data.into_iter().map(|c| c.re * scale).collect();
        Field::from_raw(self.grid.clone(), values)
    }

    /// Complex inverse transform without taking the real part, used to
    /// measure imaginary residue.
    #[cfg(test)]
    pub(crate) fn inverse_complex(&self, coefficients: &[Complex<T>]) -> Vec<Complex<T>> {
        let mut data = coefficients.to_vec();
        self.transform_in_place(&mut data, true);
        let scale = T::one() / T::lit(self.grid.total_volume());
        data.into_iter().map(|c| c * scale).collect()
    }

    /// Hermitian coefficients `c` whose inverse transform is `1/(N V) * H u`,
    /// where `H` is the real Hartley matrix `cos(k.x) + sin(k.x)`.
    pub fn hartley_pack(&self, u: &[T]) -> Vec<Complex<T>> {
        let half = T::lit(0.5);
        (0..u.len())
            .map(|k| {
                let m = self.grid.negated_mode(k);
                Complex::new((u[k] + u[m]) * half, -(u[k] - u[m]) * half)
            })
            .collect()
    }

    /// Standardized synthesis `phi = (N V)^{-1/2} H u`.
    ///
    /// For independent unit Gaussian `u_k` scaled by `sqrt(P(k))` with
    /// `P(k) = P(-k)`, the result has covariance
    /// `1/(N V) sum_k P(k) cos(k.(x - y))`. The map is symmetric, so it is
    /// its own adjoint.
    pub fn standardized_synthesis(&self, u: &[T]) -> Field<T> {
        let norm = T::lit(self.grid.total_volume().sqrt());
        let packed: Vec<Complex<T>> = self.hartley_pack(u).into_iter().map(|c| c * norm).collect();
        self.inverse_unchecked(&packed)
    }

    /// Adjoint of [`Self::standardized_synthesis`], evaluated through the
    /// forward transform.
    pub fn standardized_synthesis_adjoint(&self, g: &[T]) -> Vec<T> {
        let mut data: Vec<Complex<T>> = g.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.transform_in_place(&mut data, false);
        let norm = T::one() / T::lit(self.grid.total_volume().sqrt());
        data.into_iter().map(|c| (c.re - c.im) * norm).collect()
    }
}

/// Forward harmonic transform of a field (plans a transform on the fly).
pub fn harmonic_transform<T: Real>(f: &Field<T>) -> HarmonicField<T> {
    HarmonicTransform::new(f.grid())
        .forward(f)
        .expect("transform planned for the field's own grid")
}

/// Inverse harmonic transform; rejects input that is not Hermitian.
pub fn inverse_transform<T: Real>(h: &HarmonicField<T>) -> Result<Field<T>> {
    HarmonicTransform::new(h.grid()).inverse(h)
}

/// Logarithmic binning of nonzero mode lengths, `kappa = ln(|k| / k0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBinning {
    grid: Grid,
    k0: f64,
    kappa_of_bin: Vec<f64>,
    bin_of_mode: Vec<Option<usize>>,
    kappa_of_mode: Vec<f64>,
    counts: Vec<usize>,
}

impl ModeBinning {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn n_bins(&self) -> usize {
        self.kappa_of_bin.len()
    }

    pub fn kappa_of_bin(&self) -> &[f64] {
        &self.kappa_of_bin
    }

    /// Bin index of each harmonic mode; `None` for the zero mode.
    pub fn bin_of_mode(&self) -> &[Option<usize>] {
        &self.bin_of_mode
    }

    /// `kappa` of every mode (`-inf` for the zero mode).
    pub fn kappa_of_mode(&self) -> &[f64] {
        &self.kappa_of_mode
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

/// Builds logarithmic bins with `bins_per_decade` centers per factor ten in
/// `|k|`, covering the nonzero modes; every mode goes to its nearest center
/// and empty bins are dropped.
pub fn build_binning(grid: &Grid, k0: f64, bins_per_decade: usize) -> Result<ModeBinning> {
    if !(k0 > 0.0 && k0.is_finite()) {
        return Err(Error::InvalidParameter(format!("k0 must be positive, got {k0}")));
    }
    if bins_per_decade == 0 {
        return Err(Error::InvalidParameter("bins_per_decade must be at least 1".into()));
    }
    if grid.size() < 2 {
        return Err(Error::InvalidGrid("single-pixel grid has no nonzero modes".into()));
    }
    let kappa_of_mode: Vec<f64> = grid.k_lengths().into_iter().map(|k| (k / k0).ln()).collect();
    let (lo, hi) = kappa_of_mode
        .iter()
        .skip(1)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let spacing = std::f64::consts::LN_10 / bins_per_decade as f64;
    let n_centers = ((hi - lo) / spacing - 1e-9).ceil().max(0.0) as usize + 1;
    let centers: Vec<f64> = (0..n_centers).map(|i| lo + i as f64 * spacing).collect();

    let mut raw_bin = vec![None; grid.size()];
    let mut raw_counts = vec![0usize; n_centers];
    for (mode, &kappa) in kappa_of_mode.iter().enumerate().skip(1) {
        let b = (((kappa - lo) / spacing).round().max(0.0) as usize).min(n_centers - 1);
        raw_bin[mode] = Some(b);
        raw_counts[b] += 1;
    }

    let mut remap = vec![usize::MAX; n_centers];
    let mut kappa_of_bin = Vec::new();
    let mut counts = Vec::new();
    for (b, &c) in raw_counts.iter().enumerate() {
        if c > 0 {
            remap[b] = kappa_of_bin.len();
            kappa_of_bin.push(centers[b]);
            counts.push(c);
        }
    }
    let bin_of_mode = raw_bin.into_iter().map(|b| b.map(|b| remap[b])).collect();

    Ok(ModeBinning {
        grid: grid.clone(),
        k0,
        kappa_of_bin,
        bin_of_mode,
        kappa_of_mode,
        counts,
    })
}

//! Gaussian likelihood, the standardized information Hamiltonian, and the
//! Fisher metric as an implicit operator.
//!
//! Inference engines work against [`InverseProblem`], which only needs a
//! forward prediction and its linearization at a point. Both the nonlinear
//! [`GenerativeModel`] and a plain linear response implement it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linop::{LinearOperator, SharedOperator};
use crate::model::{ForwardPass, GenerativeModel, LatentVector};
use crate::scalar::{dot, Real};

/// Diagonal Gaussian noise covariance `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel<T> {
    variance: Vec<T>,
}

impl<T: Real> NoiseModel<T> {
    /// White noise with standard deviation `sigma` on `len` data points.
    pub fn white(sigma: T, len: usize) -> Result<Self> {
        Self::diagonal(vec![sigma * sigma; len])
    }

    pub fn from_sigmas(sigmas: &[T]) -> Result<Self> {
        Self::diagonal(sigmas.iter().map(|&s| s * s).collect())
    }

    pub fn diagonal(variance: Vec<T>) -> Result<Self> {
        if let Some(v) = variance.iter().find(|v| !(**v > T::zero() && v.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive and finite, got {v}"
            )));
        }
        Ok(Self { variance })
    }

    pub fn len(&self) -> usize {
        self.variance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variance.is_empty()
    }

    pub fn variance(&self) -> &[T] {
        &self.variance
    }

    pub fn sigmas(&self) -> Vec<T> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }

    /// `N^-1 r`
    pub fn precision_apply(&self, r: &[T]) -> Vec<T> {
        r.iter().zip(&self.variance).map(|(&x, &v)| x / v).collect()
    }

    /// `N^-1/2 r`
    pub fn inverse_sqrt_apply(&self, r: &[T]) -> Vec<T> {
        r.iter().zip(&self.variance).map(|(&x, &v)| x / v.sqrt()).collect()
    }

    /// `r† N^-1 r / 2`
    pub fn energy(&self, r: &[T]) -> T {
        let half = T::lit(0.5);
        r.iter()
            .zip(&self.variance)
            .fold(T::zero(), |acc, (&x, &v)| acc + x * x / v)
            * half
    }
}

/// Noise description as it appears in configuration and sidecar files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    White(f64),
    Diagonal(Vec<f64>),
}

impl NoiseSpec {
    pub fn build<T: Real>(&self, len: usize) -> Result<NoiseModel<T>> {
        match self {
            Self::White(s) => NoiseModel::white(T::lit(*s), len),
            Self::Diagonal(s) => {
                if s.len() != len {
                    return Err(Error::DimensionMismatch {
                        expected: len,
                        got: s.len(),
                        context: "noise sigmas",
                    });
                }
                NoiseModel::from_sigmas(&s.iter().map(|&x| T::lit(x)).collect::<Vec<_>>())
            }
        }
    }
}

/// Observed data `d` with its noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    d: Vec<T>,
    noise: NoiseModel<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(d: Vec<T>, noise: NoiseModel<T>) -> Result<Self> {
        if d.len() != noise.len() {
            return Err(Error::DimensionMismatch {
                expected: noise.len(),
                got: d.len(),
                context: "data vector against noise model",
            });
        }
        if !d.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("data vector"));
        }
        Ok(Self { d, noise })
    }

    /// No measurements at all; the posterior equals the prior.
    pub fn empty() -> Self {
        Self {
            d: Vec::new(),
            noise: NoiseModel { variance: Vec::new() },
        }
    }

    pub fn d(&self) -> &[T] {
        &self.d
    }

    pub fn noise(&self) -> &NoiseModel<T> {
        &self.noise
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }
}

/// Prediction and Jacobian of the data model at one latent point.
pub trait Linearization<T: Real>: Send + Sync {
    /// Noiseless data `d'(x)`.
    fn prediction(&self) -> &[T];
    fn jvp(&self, v: &[T]) -> Vec<T>;
    fn vjp(&self, w: &[T]) -> Vec<T>;
}

/// Standardized inverse problem: unit Gaussian prior on `x` and Gaussian
/// noise on `d = d'(x) + n`.
pub trait InverseProblem<T: Real>: Sync {
    type Point: Linearization<T>;

    fn latent_dim(&self) -> usize;
    fn data(&self) -> &Dataset<T>;
    fn linearize(&self, x: &[T]) -> Result<Self::Point>;

    /// Whether `d'` is affine in `x`.
    fn is_linear(&self) -> bool {
        false
    }
}

/// Value, split, and gradient of `H(d, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Energy<T> {
    pub value: T,
    pub likelihood: T,
    pub prior: T,
    pub gradient: Vec<T>,
    /// `d - d'(x)`
    pub residual: Vec<T>,
}

/// `H(d, x) = (d - d')† N^-1 (d - d') / 2 + x† x / 2` and its gradient.
pub fn energy<T: Real, P: InverseProblem<T>>(problem: &P, x: &[T]) -> Result<(Energy<T>, P::Point)> {
    if x.len() != problem.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: problem.latent_dim(),
            got: x.len(),
            context: "latent point",
        });
    }
    let point = problem.linearize(x)?;
    let data = problem.data();
    let residual: Vec<T> = data.d().iter().zip(point.prediction()).map(|(&d, &p)| d - p).collect();
    let likelihood = data.noise().energy(&residual);
    let prior = dot(x, x) * T::lit(0.5);
    let mut gradient = point.vjp(&data.noise().precision_apply(&residual));
    for (g, &xi) in gradient.iter_mut().zip(x) {
        *g = xi - *g;
    }
    let value = likelihood + prior;
    if !value.is_finite() {
        return Err(Error::NonFinite("Hamiltonian"));
    }
    Ok((
        Energy {
            value,
            likelihood,
            prior,
            gradient,
            residual,
        },
        point,
    ))
}

/// Only the value of `H`, skipping the gradient.
pub fn energy_value<T: Real, P: InverseProblem<T>>(problem: &P, x: &[T]) -> Result<T> {
    let point = problem.linearize(x)?;
    let data = problem.data();
    let residual: Vec<T> = data.d().iter().zip(point.prediction()).map(|(&d, &p)| d - p).collect();
    let value = data.noise().energy(&residual) + dot(x, x) * T::lit(0.5);
    if !value.is_finite() {
        return Err(Error::NonFinite("Hamiltonian"));
    }
    Ok(value)
}

/// `M = J† N^-1 J` at one linearization.
pub struct FisherMetric<'a, T: Real, L> {
    point: &'a L,
    noise: &'a NoiseModel<T>,
    dim: usize,
}

impl<'a, T: Real, L: Linearization<T>> FisherMetric<'a, T, L> {
    pub fn new(point: &'a L, noise: &'a NoiseModel<T>, dim: usize) -> Self {
        Self { point, noise, dim }
    }
}

impl<T: Real, L: Linearization<T>> LinearOperator<T> for FisherMetric<'_, T, L> {
    fn domain_dim(&self) -> usize {
        self.dim
    }
    fn codomain_dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        if self.noise.is_empty() {
            return vec![T::zero(); self.dim];
        }
        self.point.vjp(&self.noise.precision_apply(&self.point.jvp(v)))
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.apply(w)
    }
}

/// `1 + mean_i M(x_i)`, the approximate posterior precision. With a single
/// point it is exactly `Θ^-1 = 1 + M(θ)`.
pub struct RegularizedPrecision<'a, T: Real, L> {
    points: Vec<&'a L>,
    noise: &'a NoiseModel<T>,
    dim: usize,
}

impl<'a, T: Real, L: Linearization<T>> RegularizedPrecision<'a, T, L> {
    pub fn new(point: &'a L, noise: &'a NoiseModel<T>, dim: usize) -> Self {
        Self::averaged(vec![point], noise, dim)
    }

    pub fn averaged(points: Vec<&'a L>, noise: &'a NoiseModel<T>, dim: usize) -> Self {
        Self { points, noise, dim }
    }
}

impl<T: Real, L: Linearization<T>> LinearOperator<T> for RegularizedPrecision<'_, T, L> {
    fn domain_dim(&self) -> usize {
        self.dim
    }
    fn codomain_dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        let mut out = v.to_vec();
        if self.noise.is_empty() || self.points.is_empty() {
            return out;
        }
        let parts: Vec<Vec<T>> = self
            .points
            .par_iter()
            .map(|p| FisherMetric::new(*p, self.noise, self.dim).apply(v))
            .collect();
        let scale = T::one() / T::lit(self.points.len() as f64);
        for part in parts {
            for (o, m) in out.iter_mut().zip(part) {
                *o = *o + m * scale;
            }
        }
        out
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.apply(w)
    }
}

/// A [`GenerativeModel`] bound to a dataset.
#[derive(Debug, Clone, Copy)]
pub struct ModelLikelihood<'a, T: Real> {
    model: &'a GenerativeModel<T>,
    data: &'a Dataset<T>,
}

impl<'a, T: Real> ModelLikelihood<'a, T> {
    pub fn new(model: &'a GenerativeModel<T>, data: &'a Dataset<T>) -> Result<Self> {
        if !data.is_empty() && data.len() != model.data_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.data_dim(),
                got: data.len(),
                context: "dataset against model response",
            });
        }
        Ok(Self { model, data })
    }

    pub fn model(&self) -> &'a GenerativeModel<T> {
        self.model
    }
}

/// Forward pass of a model, seen as a linearization.
pub struct ModelPoint<'a, T: Real> {
    model: &'a GenerativeModel<T>,
    pass: ForwardPass<T>,
    empty_data: bool,
}

impl<T: Real> ModelPoint<'_, T> {
    pub fn pass(&self) -> &ForwardPass<T> {
        &self.pass
    }

    pub fn into_pass(self) -> ForwardPass<T> {
        self.pass
    }
}

impl<T: Real> Linearization<T> for ModelPoint<'_, T> {
    fn prediction(&self) -> &[T] {
        if self.empty_data {
            &[]
        } else {
            &self.pass.d_prime
        }
    }
    fn jvp(&self, v: &[T]) -> Vec<T> {
        if self.empty_data {
            return Vec::new();
        }
        let t = LatentVector::from_flat(self.model.layout(), v).expect("latent length");
        self.model.jvp(&self.pass, &t).expect("checked dimensions")
    }
    fn vjp(&self, w: &[T]) -> Vec<T> {
        if self.empty_data {
            return vec![T::zero(); self.model.latent_dim()];
        }
        self.model.vjp(&self.pass, w).expect("checked dimensions").to_flat()
    }
}

impl<'a, T: Real> InverseProblem<T> for ModelLikelihood<'a, T> {
    type Point = ModelPoint<'a, T>;

    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }
    fn data(&self) -> &Dataset<T> {
        self.data
    }
    fn linearize(&self, x: &[T]) -> Result<Self::Point> {
        let zeta = LatentVector::from_flat(self.model.layout(), x)?;
        Ok(ModelPoint {
            model: self.model,
            pass: self.model.forward(&zeta)?,
            empty_data: self.data.is_empty(),
        })
    }
    fn is_linear(&self) -> bool {
        self.model.is_linear()
    }
}

/// `d = R x + n` with a standardized prior on `x`.
#[derive(Clone)]
pub struct LinearGaussianProblem<T: Real> {
    response: SharedOperator<T>,
    data: Dataset<T>,
}

impl<T: Real> LinearGaussianProblem<T> {
    pub fn new(response: SharedOperator<T>, data: Dataset<T>) -> Result<Self> {
        if response.codomain_dim() != data.len() {
            return Err(Error::DimensionMismatch {
                expected: response.codomain_dim(),
                got: data.len(),
                context: "dataset against linear response",
            });
        }
        Ok(Self { response, data })
    }

    pub fn response(&self) -> &SharedOperator<T> {
        &self.response
    }
}

pub struct LinearPoint<T: Real> {
    response: SharedOperator<T>,
    prediction: Vec<T>,
}

impl<T: Real> Linearization<T> for LinearPoint<T> {
    fn prediction(&self) -> &[T] {
        &self.prediction
    }
    fn jvp(&self, v: &[T]) -> Vec<T> {
        self.response.apply(v)
    }
    fn vjp(&self, w: &[T]) -> Vec<T> {
        self.response.adjoint_apply(w)
    }
}

impl<T: Real> InverseProblem<T> for LinearGaussianProblem<T> {
    type Point = LinearPoint<T>;

    fn latent_dim(&self) -> usize {
        self.response.domain_dim()
    }
    fn data(&self) -> &Dataset<T> {
        &self.data
    }
    fn linearize(&self, x: &[T]) -> Result<Self::Point> {
        Ok(LinearPoint {
            response: self.response.clone(),
            prediction: self.response.apply(x),
        })
    }
    fn is_linear(&self) -> bool {
        true
    }
}

/// `H(d, zeta)` for a generative model, with the gradient as a latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianEvaluation<T> {
    pub value: T,
    pub likelihood: T,
    pub prior: T,
    pub gradient: LatentVector<T>,
    pub residual: Vec<T>,
}

pub fn hamiltonian<T: Real>(
    model: &GenerativeModel<T>,
    data: &Dataset<T>,
    zeta: &LatentVector<T>,
) -> Result<HamiltonianEvaluation<T>> {
    let problem = ModelLikelihood::new(model, data)?;
    let (e, _) = energy(&problem, &zeta.to_flat())?;
    Ok(HamiltonianEvaluation {
        value: e.value,
        likelihood: e.likelihood,
        prior: e.prior,
        gradient: LatentVector::from_flat(model.layout(), &e.gradient)?,
        residual: e.residual,
    })
}

/// `M(θ) v`
pub fn fisher_metric_apply<T: Real>(
    model: &GenerativeModel<T>,
    data: &Dataset<T>,
    theta: &LatentVector<T>,
    v: &LatentVector<T>,
) -> Result<LatentVector<T>> {
    let problem = ModelLikelihood::new(model, data)?;
    let point = problem.linearize(&theta.to_flat())?;
    let out = FisherMetric::new(&point, data.noise(), model.latent_dim()).apply(&v.to_flat());
    LatentVector::from_flat(model.layout(), &out)
}

/// `(1 + M(θ)) v`
pub fn regularized_precision_apply<T: Real>(
    model: &GenerativeModel<T>,
    data: &Dataset<T>,
    theta: &LatentVector<T>,
    v: &LatentVector<T>,
) -> Result<LatentVector<T>> {
    let problem = ModelLikelihood::new(model, data)?;
    let point = problem.linearize(&theta.to_flat())?;
    let out = RegularizedPrecision::new(&point, data.noise(), model.latent_dim()).apply(&v.to_flat());
    LatentVector::from_flat(model.layout(), &out)
}

/// Field excitations of one datum in a multi-datum fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldExcitation<T> {
    pub xi: Vec<T>,
    pub xi_zero: T,
}

impl<T: Real> FieldExcitation<T> {
    pub fn of(zeta: &LatentVector<T>) -> Self {
        Self {
            xi: zeta.xi.clone(),
            xi_zero: zeta.xi_zero,
        }
    }

    fn norm_sqr(&self) -> T {
        dot(&self.xi, &self.xi) + self.xi_zero * self.xi_zero
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointEvaluation<T> {
    pub value: T,
    pub likelihood: T,
    pub xi_prior: T,
    pub eta_prior: T,
    pub xi_gradients: Vec<FieldExcitation<T>>,
    pub eta_gradient: Vec<T>,
}

/// `sum_i H(d_i | xi_i, eta) + sum_i |xi_i|^2 / 2 + |eta|^2 / 2` with one
/// shared spectrum excitation.
pub fn joint_hamiltonian<T: Real>(
    model: &GenerativeModel<T>,
    datasets: &[Dataset<T>],
    xis: &[FieldExcitation<T>],
    eta: &[T],
) -> Result<JointEvaluation<T>> {
    if datasets.len() != xis.len() {
        return Err(Error::DimensionMismatch {
            expected: datasets.len(),
            got: xis.len(),
            context: "one field excitation per dataset",
        });
    }
    let per_datum: Vec<(T, LatentVector<T>)> = datasets
        .par_iter()
        .zip(xis)
        .map(|(data, xi)| {
            let zeta = LatentVector {
                xi: xi.xi.clone(),
                eta: eta.to_vec(),
                xi_zero: xi.xi_zero,
            };
            let problem = ModelLikelihood::new(model, data)?;
            let point = problem.linearize(&zeta.to_flat())?;
            let residual: Vec<T> = data.d().iter().zip(point.prediction()).map(|(&d, &p)| d - p).collect();
            let lik = data.noise().energy(&residual);
            let g = point.vjp(&data.noise().precision_apply(&residual));
            Ok((lik, LatentVector::from_flat(model.layout(), &g)?))
        })
        .collect::<Result<_>>()?;

    let half = T::lit(0.5);
    let mut likelihood = T::zero();
    let mut xi_prior = T::zero();
    let mut eta_gradient = eta.to_vec();
    let mut xi_gradients = Vec::with_capacity(xis.len());
    for ((lik, g), xi) in per_datum.into_iter().zip(xis) {
        likelihood = likelihood + lik;
        xi_prior = xi_prior + xi.norm_sqr() * half;
        for (e, ge) in eta_gradient.iter_mut().zip(&g.eta) {
            *e = *e - *ge;
        }
        xi_gradients.push(FieldExcitation {
            xi: xi.xi.iter().zip(&g.xi).map(|(&x, &gx)| x - gx).collect(),
            xi_zero: xi.xi_zero - g.xi_zero,
        });
    }
    let eta_prior = dot(eta, eta) * half;
    let value = likelihood + xi_prior + eta_prior;
    if !value.is_finite() {
        return Err(Error::NonFinite("joint Hamiltonian"));
    }
    Ok(JointEvaluation {
        value,
        likelihood,
        xi_prior,
        eta_prior,
        xi_gradients,
        eta_gradient,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::grid::{build_binning, Grid};
    use crate::linop::{DenseOperator, LinearOperator};
    use crate::model::{random_chords, PointwiseNonlinearity, ResponseSpec, SpectrumInterpolation, SpectrumPrior};
    use crate::rng;

    fn tomography_model() -> GenerativeModel<f64> {
        let grid = Grid::new(vec![12, 10], vec![1.0 / 12.0, 0.1]).unwrap();
        let binning = build_binning(&grid, 2.0 * std::f64::consts::PI, 6).unwrap();
        let prior = SpectrumPrior::new(0.0, -3.0, 1.0, 1.0, 0.4, 1.0).with_interpolation(SpectrumInterpolation::Linear);
        let chords = random_chords(&grid, 15, 2);
        GenerativeModel::new(
            binning,
            prior,
            PointwiseNonlinearity::Sigmoid { s0: 1.0 },
            ResponseSpec::LineOfSight { chords, step_fraction: 0.5 },
        )
        .unwrap()
    }

    fn synthetic_data(model: &GenerativeModel<f64>, sigma: f64, seed: u64) -> Dataset<f64> {
        let truth = model.sample_latent(seed, 0);
        let clean = model.forward(&truth).unwrap().d_prime;
        let mut r = rng::stream(seed, 1);
        let noise: Vec<f64> = rng::standard_normal_vec(&mut r, clean.len());
        let d = clean.iter().zip(&noise).map(|(c, n)| c + sigma * n).collect();
        Dataset::new(d, NoiseModel::white(sigma, clean.len()).unwrap()).unwrap()
    }

    fn linear_model(n: usize, mask: Vec<usize>) -> GenerativeModel<f64> {
        let grid = Grid::new(vec![n], vec![1.0 / n as f64]).unwrap();
        let binning = build_binning(&grid, 2.0 * std::f64::consts::PI, 8).unwrap();
        GenerativeModel::new(
            binning,
            SpectrumPrior::fixed(0.0, -2.0, 1.0, 0.7),
            PointwiseNonlinearity::Identity,
            ResponseSpec::Mask { indices: mask },
        )
        .unwrap()
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::<f64>::white(0.0, 3).is_err());
        assert!(NoiseModel::<f64>::diagonal(vec![1.0, -1.0]).is_err());
        let n = NoiseModel::white(2.0, 2).unwrap();
        assert_eq!(n.precision_apply(&[4.0, 8.0]), vec![1.0, 2.0]);
        assert_eq!(n.energy(&[2.0, 2.0]), 1.0);
        assert!(Dataset::new(vec![f64::NAN], NoiseModel::white(1.0, 1).unwrap()).is_err());
        assert!(Dataset::new(vec![1.0], NoiseModel::white(1.0, 2).unwrap()).is_err());
    }

    #[test]
    fn hamiltonian_trivial_values() {
        let m = tomography_model();
        let zero = LatentVector::zeros(m.layout());
        let d = m.forward(&zero).unwrap().d_prime;
        let data = Dataset::new(d.clone(), NoiseModel::white(0.1, d.len()).unwrap()).unwrap();
        let h = hamiltonian(&m, &data, &zero).unwrap();
        assert_eq!(h.value, 0.0);

        let z = m.sample_latent(3, 0);
        let h = hamiltonian(&m, &Dataset::empty(), &z).unwrap();
        assert!((h.value - 0.5 * z.norm_sqr()).abs() < 1e-12);
        assert_eq!(h.likelihood, 0.0);
        for (g, x) in h.gradient.to_flat().iter().zip(z.to_flat()) {
            assert_eq!(*g, x);
        }
    }

    #[test]
    fn hamiltonian_gradient_matches_finite_differences() {
        let m = tomography_model();
        let data = synthetic_data(&m, 0.05, 9);
        let problem = ModelLikelihood::new(&m, &data).unwrap();
        let h = 1e-4;
        let mut failures = 0;
        for i in 0..100 {
            let z = m.sample_latent(20, i).to_flat();
            let (e, _) = energy(&problem, &z).unwrap();
            assert_eq!(e.value, e.likelihood + e.prior);
            let v: Vec<f64> = m.sample_latent(21, i).to_flat();
            let plus: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let fd = (energy_value(&problem, &plus).unwrap() - energy_value(&problem, &minus).unwrap()) / (2.0 * h);
            let an = dot(&e.gradient, &v);
            if (fd - an).abs() > 1e-5 * an.abs().max(1e-8) {
                failures += 1;
            }
        }
        assert_eq!(failures, 0);
    }

    #[test]
    fn fisher_metric_linear_matches_dense() {
        let m = linear_model(8, vec![0, 1, 4, 6]);
        let d = vec![0.3, -0.2, 1.0, 0.5];
        let data = Dataset::new(d, NoiseModel::from_sigmas(&[0.3, 0.5, 0.2, 0.4]).unwrap()).unwrap();
        let theta = m.sample_latent(1, 1);
        let pass = m.forward(&theta).unwrap();
        let r = DenseOperator::from_operator(&m.data_jacobian(&pass));
        let precision: Vec<f64> = data.noise().variance().iter().map(|v| 1.0 / v).collect();
        let n = m.latent_dim();
        for i in 0..10 {
            let v = m.sample_latent(2, i);
            let mv = fisher_metric_apply(&m, &data, &theta, &v).unwrap().to_flat();
            let rv = r.apply(&v.to_flat());
            let scaled: Vec<f64> = rv.iter().zip(&precision).map(|(a, p)| a * p).collect();
            let dense = r.adjoint_apply(&scaled);
            let num: f64 = mv.iter().zip(&dense).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = dense.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(num <= 1e-10 * den);
            let pv = regularized_precision_apply(&m, &data, &theta, &v).unwrap().to_flat();
            for j in 0..n {
                assert!((pv[j] - (v.to_flat()[j] + dense[j])).abs() <= 1e-10 * (1.0 + den));
            }
        }
        let zero = fisher_metric_apply(&m, &data, &theta, &LatentVector::zeros(m.layout())).unwrap();
        assert_eq!(zero.norm_sqr(), 0.0);
    }

    #[test]
    fn fisher_metric_psd_and_self_adjoint() {
        let m = tomography_model();
        let data = synthetic_data(&m, 0.05, 4);
        let problem = ModelLikelihood::new(&m, &data).unwrap();
        let theta = m.sample_latent(5, 0).to_flat();
        let point = problem.linearize(&theta).unwrap();
        let fisher = FisherMetric::new(&point, data.noise(), m.latent_dim());
        let prec = RegularizedPrecision::new(&point, data.noise(), m.latent_dim());
        let mut r = rng::stream(6, 0);
        for _ in 0..1000 {
            let v: Vec<f64> = rng::standard_normal_vec(&mut r, m.latent_dim());
            let mv = fisher.apply(&v);
            assert!(dot(&v, &mv) >= 0.0);
            assert!(dot(&v, &prec.apply(&v)) >= dot(&v, &v));
        }
        for _ in 0..20 {
            let v: Vec<f64> = rng::standard_normal_vec(&mut r, m.latent_dim());
            let w: Vec<f64> = rng::standard_normal_vec(&mut r, m.latent_dim());
            let a = dot(&fisher.apply(&v), &w);
            let b = dot(&v, &fisher.apply(&w));
            assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
        }
    }

    #[test]
    fn precision_is_identity_without_data() {
        let m = tomography_model();
        let theta = m.sample_latent(1, 0);
        let v = m.sample_latent(2, 0);
        let out = regularized_precision_apply(&m, &Dataset::empty(), &theta, &v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn joint_hamiltonian_reduces_and_adds() {
        let m = tomography_model();
        let data = synthetic_data(&m, 0.1, 12);
        let z = m.sample_latent(13, 0);
        let single = hamiltonian(&m, &data, &z).unwrap();
        let joint = joint_hamiltonian(&m, &[data.clone()], &[FieldExcitation::of(&z)], &z.eta).unwrap();
        assert!((joint.value - single.value).abs() <= 1e-12 * single.value.abs());

        let two = joint_hamiltonian(
            &m,
            &[data.clone(), data.clone()],
            &[FieldExcitation::of(&z), FieldExcitation::of(&z)],
            &z.eta,
        )
        .unwrap();
        let xi_prior = 0.5 * (dot(&z.xi, &z.xi) + z.xi_zero * z.xi_zero);
        let eta_prior = 0.5 * dot(&z.eta, &z.eta);
        assert_eq!(two.likelihood, 2.0 * single.likelihood);
        assert_eq!(two.xi_prior, 2.0 * xi_prior);
        assert_eq!(two.eta_prior, eta_prior);
        assert!(joint_hamiltonian(&m, &[data], &[], &z.eta).is_err());
    }

    #[test]
    fn joint_hamiltonian_gradient_matches_finite_differences() {
        let m = tomography_model();
        let datasets = vec![synthetic_data(&m, 0.1, 30), synthetic_data(&m, 0.1, 31)];
        let layout = m.layout();
        let pack = |x: &[f64]| {
            let block = layout.n_xi + 1;
            let xis: Vec<FieldExcitation<f64>> = (0..2)
                .map(|i| FieldExcitation {
                    xi: x[i * block..i * block + layout.n_xi].to_vec(),
                    xi_zero: x[i * block + layout.n_xi],
                })
                .collect();
            (xis, x[2 * block..].to_vec())
        };
        let dim = 2 * (layout.n_xi + 1) + layout.n_eta;
        let mut r = rng::stream(40, 0);
        for _ in 0..20 {
            let x: Vec<f64> = rng::standard_normal_vec(&mut r, dim);
            let v: Vec<f64> = rng::standard_normal_vec(&mut r, dim);
            let (xis, eta) = pack(&x);
            let e = joint_hamiltonian(&m, &datasets, &xis, &eta).unwrap();
            let mut grad = Vec::new();
            for g in &e.xi_gradients {
                grad.extend_from_slice(&g.xi);
                grad.push(g.xi_zero);
            }
            grad.extend_from_slice(&e.eta_gradient);
            let h = 1e-4;
            let eval = |s: f64| {
                let y: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + s * b).collect();
                let (xis, eta) = pack(&y);
                joint_hamiltonian(&m, &datasets, &xis, &eta).unwrap().value
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = dot(&grad, &v);
            assert!((fd - an).abs() <= 1e-5 * an.abs(), "{fd} vs {an}");
        }
    }

    #[test]
    fn linear_problem_energy() {
        let r = DenseOperator::new(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap();
        let data = Dataset::new(vec![1.0, 2.0], NoiseModel::white(1.0, 2).unwrap()).unwrap();
        let p = LinearGaussianProblem::new(Arc::new(r), data).unwrap();
        let (e, _) = energy(&p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(e.value, 2.5);
        assert_eq!(e.gradient, vec![-1.0, -2.0, 0.0]);
    }
}

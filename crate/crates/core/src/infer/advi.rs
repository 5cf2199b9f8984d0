use log::debug;
use rayon::prelude::*;

use super::{Method, PosteriorApprox};
use crate::error::{Error, Result};
use crate::likelihood::{energy, InverseProblem};
use crate::rng;
use crate::scalar::Real;

const PURPOSE_ADVI: u32 = 2;
const PURPOSE_ADVI_REPORT: u32 = 3;

#[derive(Debug, Clone)]
pub struct AdviOptions<T> {
    pub iterations: usize,
    pub learning_rate: T,
    /// The step size decays as `lr / sqrt(1 + t / decay_steps)`.
    pub decay_steps: T,
    pub samples_per_step: usize,
    /// Fraction of the final iterations whose iterates are averaged.
    pub averaging_fraction: T,
    pub initial_log_std: T,
    /// Posterior draws returned with the result.
    pub report_samples: usize,
    pub seed: u64,
}

impl<T: Real> Default for AdviOptions<T> {
    fn default() -> Self {
        Self {
            iterations: 4000,
            learning_rate: T::lit(0.02),
            decay_steps: T::lit(500.0),
            samples_per_step: 2,
            averaging_fraction: T::lit(0.5),
            initial_log_std: T::zero(),
            report_samples: 8,
            seed: 0,
        }
    }
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    fn new(dim: usize) -> Self {
        Self {
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [T], grad: &[T], lr: T) {
        let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
        self.t += 1;
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] = params[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Mean-field Gaussian VI with reparameterized stochastic gradients.
///
/// Optimizes `θ` and `λ` for `x = θ + exp(λ) ⊙ ε`. The KL estimate
/// `mean H(x) - sum λ` drops constants.
pub fn advi_mfa<T: Real, P: InverseProblem<T>>(
    problem: &P,
    init: &[T],
    options: &AdviOptions<T>,
) -> Result<PosteriorApprox<T>> {
    let dim = problem.latent_dim();
    if init.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: init.len(),
            context: "ADVI initial point",
        });
    }
    if options.samples_per_step == 0 || options.iterations == 0 {
        return Err(Error::InvalidParameter("ADVI needs samples and iterations".into()));
    }
    let mut params = init.to_vec();
    params.extend(std::iter::repeat_n(options.initial_log_std, dim));
    let mut adam = Adam::new(2 * dim);
    let averaging_start =
        options.iterations - ((options.averaging_fraction.to_f64_lossy() * options.iterations as f64) as usize).max(1);
    let mut average = vec![T::zero(); 2 * dim];
    let mut averaged = 0usize;
    let mut kl_history = Vec::with_capacity(options.iterations);
    let n_samples = T::lit(options.samples_per_step as f64);

    for it in 0..options.iterations {
        let (theta, lambda) = params.split_at(dim);
        let std: Vec<T> = lambda.iter().map(|l| l.exp()).collect();
        let evaluations: Vec<(T, Vec<T>, Vec<T>)> = (0..options.samples_per_step)
            .into_par_iter()
            .map(|j| {
                let mut r = rng::stream(options.seed, rng::stream_id(PURPOSE_ADVI, it as u32, j as u32));
                let eps: Vec<T> = rng::standard_normal_vec(&mut r, dim);
                let x: Vec<T> = (0..dim).map(|i| theta[i] + std[i] * eps[i]).collect();
                let (e, _) = energy(problem, &x)?;
                Ok((e.value, e.gradient, eps))
            })
            .collect::<Result<_>>()?;

        let mut grad = vec![T::zero(); 2 * dim];
        let mut kl = T::zero();
        for (value, g, eps) in &evaluations {
            kl = kl + *value / n_samples;
            for i in 0..dim {
                grad[i] = grad[i] + g[i] / n_samples;
                grad[dim + i] = grad[dim + i] + g[i] * std[i] * eps[i] / n_samples;
            }
        }
        for i in 0..dim {
            // entropy term: d/dλ (-sum λ) = -1
            grad[dim + i] = grad[dim + i] - T::one();
            kl = kl - lambda[i];
        }
        if !kl.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("ADVI KL estimate became {kl} at step {it}")));
        }
        kl_history.push(kl);

        let lr = options.learning_rate / (T::one() + T::lit(it as f64) / options.decay_steps).sqrt();
        adam.step(&mut params, &grad, lr);

        if it >= averaging_start {
            averaged += 1;
            let w = T::one() / T::lit(averaged as f64);
            for (a, &p) in average.iter_mut().zip(&params) {
                *a = *a + (p - *a) * w;
            }
        }
        if it % 500 == 0 {
            debug!("advi step {it}: KL estimate {kl}");
        }
    }

    let (theta, log_std) = average.split_at(dim);
    let mut r = rng::stream(options.seed, rng::stream_id(PURPOSE_ADVI_REPORT, 0, 0));
    let samples = (0..options.report_samples)
        .map(|_| {
            let eps: Vec<T> = rng::standard_normal_vec(&mut r, dim);
            eps.iter().zip(log_std).map(|(&e, &l)| e * l.exp()).collect()
        })
        .collect();
    Ok(PosteriorApprox {
        method: Method::Advi,
        theta: theta.to_vec(),
        mfa_log_std: Some(log_std.to_vec()),
        samples,
        kl_history,
        inner_history: Vec::new(),
        converged: true,
        iterations: options.iterations,
    })
}

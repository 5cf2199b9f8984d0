use log::{debug, warn};
use rand::Rng;
use rayon::prelude::*;

use super::{Method, PosteriorApprox};
use crate::error::{Error, Result};
use crate::likelihood::{energy, InverseProblem, Linearization, RegularizedPrecision};
use crate::linop::{cg_solve, CgConfig};
use crate::rng;
use crate::scalar::{dot, norm, Real};

const PURPOSE_SAMPLE: u32 = 1;
const PURPOSE_REPORT: u32 = 4;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct MgviOptions<T: Real> {
    /// Number of antithetic sample pairs per outer iteration.
    pub n_pairs: usize,
    pub outer_iterations: usize,
    /// Newton steps per outer iteration.
    pub inner_iterations: usize,
    /// Absolute bound on the sampled-KL gradient that ends the inner loop.
    pub inner_gradient_tolerance: T,
    /// CG settings for drawing samples; `None` picks the dimension default.
    pub sampling_cg: Option<CgConfig<T>>,
    /// CG settings for the Newton systems; `None` picks the dimension default.
    pub newton_cg: Option<CgConfig<T>>,
    /// Antithetic pairs drawn at the final mean for reporting; `None` reuses
    /// the last optimization samples.
    pub report_pairs: Option<usize>,
    pub seed: u64,
}

impl<T: Real> Default for MgviOptions<T> {
    fn default() -> Self {
        Self {
            n_pairs: 4,
            outer_iterations: 10,
            inner_iterations: 20,
            inner_gradient_tolerance: T::lit(1e-4),
            sampling_cg: None,
            newton_cg: None,
            report_pairs: None,
            seed: 0,
        }
    }
}

/// Residual `r ~ G(0, Θ)` at a linearization, with `Θ^-1 = 1 + J† N^-1 J`:
/// `w = n1 + J† N^-1/2 n2` has covariance `Θ^-1`, and `r = Θ w`.
fn draw_residual<T: Real, L: Linearization<T>, R: Rng + ?Sized, P: InverseProblem<T>>(
    problem: &P,
    point: &L,
    cg: &CgConfig<T>,
    rng_state: &mut R,
) -> Result<Vec<T>> {
    let dim = problem.latent_dim();
    let noise = problem.data().noise();
    let n1: Vec<T> = rng::standard_normal_vec(rng_state, dim);
    if noise.is_empty() {
        return Ok(n1);
    }
    let n2: Vec<T> = rng::standard_normal_vec(rng_state, noise.len());
    let pulled = point.vjp(&noise.inverse_sqrt_apply(&n2));
    let w: Vec<T> = n1.iter().zip(pulled).map(|(&a, b)| a + b).collect();
    let precision = RegularizedPrecision::new(point, noise, dim);
    Ok(cg_solve(&precision, &w, cg)?.solution)
}

/// One draw from `G(0, Θ(θ))` with `Θ^-1 = 1 + M(θ)`.
pub fn sample_from_theta_cov<T: Real, P: InverseProblem<T>>(
    problem: &P,
    theta: &[T],
    cg: &CgConfig<T>,
    seed: u64,
) -> Result<Vec<T>> {
    let point = problem.linearize(theta)?;
    let mut r = rng::stream(seed, 0);
    draw_residual(problem, &point, cg, &mut r)
}

fn draw_pairs<T: Real, P: InverseProblem<T>>(
    problem: &P,
    theta: &[T],
    n_pairs: usize,
    cg: &CgConfig<T>,
    seed: u64,
    purpose: u32,
    outer: usize,
) -> Result<Vec<Vec<T>>> {
    let point = problem.linearize(theta)?;
    let residuals: Vec<Vec<T>> = (0..n_pairs)
        .into_par_iter()
        .map(|j| {
            let mut r = rng::stream(seed, rng::stream_id(purpose, outer as u32, j as u32));
            draw_residual(problem, &point, cg, &mut r)
        })
        .collect::<Result<_>>()?;
    Ok(residuals
        .into_iter()
        .flat_map(|r| {
            let neg = r.iter().map(|&x| -x).collect();
            [r, neg]
        })
        .collect())
}

struct SampledKl<T, L> {
    value: T,
    gradient: Vec<T>,
    points: Vec<L>,
}

/// `mean_i H(θ + r_i)` with its gradient, in fixed sample order.
fn sampled_kl<T: Real, P: InverseProblem<T>>(
    problem: &P,
    theta: &[T],
    samples: &[Vec<T>],
) -> Result<SampledKl<T, P::Point>> {
    let evals: Vec<_> = samples
        .par_iter()
        .map(|r| {
            let x: Vec<T> = theta.iter().zip(r).map(|(&t, &s)| t + s).collect();
            energy(problem, &x)
        })
        .collect::<Result<_>>()?;
    let scale = T::one() / T::lit(samples.len() as f64);
    let mut value = T::zero();
    let mut gradient = vec![T::zero(); theta.len()];
    let mut points = Vec::with_capacity(evals.len());
    for (e, p) in evals {
        value = value + e.value * scale;
        for (g, eg) in gradient.iter_mut().zip(&e.gradient) {
            *g = *g + *eg * scale;
        }
        points.push(p);
    }
    Ok(SampledKl { value, gradient, points })
}

fn sampled_kl_value<T: Real, P: InverseProblem<T>>(problem: &P, theta: &[T], samples: &[Vec<T>]) -> Option<T> {
    match sampled_kl(problem, theta, samples) {
        Ok(kl) if kl.value.is_finite() => Some(kl.value),
        _ => None,
    }
}

/// Backtracking along `direction` until the sampled KL drops by the Armijo
/// margin; `None` if no admissible step exists.
fn backtrack<T: Real, P: InverseProblem<T>>(
    problem: &P,
    theta: &[T],
    samples: &[Vec<T>],
    value: T,
    slope: T,
    direction: &[T],
) -> Option<Vec<T>> {
    let mut alpha = T::one();
    for _ in 0..40 {
        let trial: Vec<T> = theta.iter().zip(direction).map(|(&t, &d)| t + alpha * d).collect();
        if let Some(v) = sampled_kl_value(problem, &trial, samples) {
            if v <= value + T::lit(ARMIJO) * alpha * slope {
                return Some(trial);
            }
        }
        alpha = alpha * T::lit(0.5);
    }
    None
}

/// Metric Gaussian variational inference.
///
/// Each outer iteration draws antithetic residuals `±r_i ~ G(0, Θ(θ))`,
/// then minimizes `mean_i H(θ ± r_i)` over `θ` with the samples held fixed
/// by Newton-CG on the sample-averaged `1 + M`.
pub fn mgvi<T: Real, P: InverseProblem<T>>(
    problem: &P,
    init: &[T],
    options: &MgviOptions<T>,
) -> Result<PosteriorApprox<T>> {
    let dim = problem.latent_dim();
    if init.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: init.len(),
            context: "MGVI initial point",
        });
    }
    if options.n_pairs == 0 {
        return Err(Error::InvalidParameter("MGVI needs at least one sample pair".into()));
    }
    let sampling_cg = options.sampling_cg.clone().unwrap_or_else(|| CgConfig::for_dimension(dim));
    let newton_cg = options.newton_cg.clone().unwrap_or_else(|| CgConfig::for_dimension(dim));
    let noise = problem.data().noise();

    let mut theta = init.to_vec();
    let mut samples = Vec::new();
    let mut kl_history = Vec::with_capacity(options.outer_iterations);
    let mut inner_history = Vec::with_capacity(options.outer_iterations);
    let mut converged = false;

    for outer in 0..options.outer_iterations {
        samples = draw_pairs(problem, &theta, options.n_pairs, &sampling_cg, options.seed, PURPOSE_SAMPLE, outer)?;
        let mut kl = sampled_kl(problem, &theta, &samples)?;
        let mut history = vec![kl.value];
        let mut inner_converged = false;
        for _ in 0..options.inner_iterations {
            if norm(&kl.gradient) <= options.inner_gradient_tolerance {
                inner_converged = true;
                break;
            }
            let curvature = RegularizedPrecision::averaged(kl.points.iter().collect(), noise, dim);
            let newton = cg_solve(&curvature, &kl.gradient, &newton_cg).map(|s| s.solution);
            let mut next = None;
            if let Ok(step) = newton {
                let direction: Vec<T> = step.iter().map(|&s| -s).collect();
                let slope = dot(&kl.gradient, &direction);
                if slope < T::zero() {
                    next = backtrack(problem, &theta, &samples, kl.value, slope, &direction);
                }
            }
            if next.is_none() {
                let direction: Vec<T> = kl.gradient.iter().map(|&g| -g).collect();
                let slope = dot(&kl.gradient, &direction);
                next = backtrack(problem, &theta, &samples, kl.value, slope, &direction);
            }
            let Some(candidate) = next else {
                debug!("mgvi outer {outer}: line search stalled");
                break;
            };
            theta = candidate;
            kl = sampled_kl(problem, &theta, &samples)?;
            history.push(kl.value);
        }
        converged = inner_converged || norm(&kl.gradient) <= options.inner_gradient_tolerance;
        if !kl.value.is_finite() {
            return Err(Error::Diverged(format!("sampled KL became {} in outer iteration {outer}", kl.value)));
        }
        debug!(
            "mgvi outer {outer}: KL {} after {} steps, |grad| {}",
            kl.value,
            history.len() - 1,
            norm(&kl.gradient)
        );
        kl_history.push(kl.value);
        inner_history.push(history);
    }
    if !converged {
        warn!("MGVI inner optimization did not reach the gradient tolerance in the last outer iteration");
    }
    if let Some(pairs) = options.report_pairs {
        samples = draw_pairs(problem, &theta, pairs, &sampling_cg, options.seed, PURPOSE_REPORT, 0)?;
    }
    Ok(PosteriorApprox {
        method: Method::Mgvi,
        theta,
        mfa_log_std: None,
        samples,
        kl_history,
        inner_history,
        converged,
        iterations: options.outer_iterations,
    })
}

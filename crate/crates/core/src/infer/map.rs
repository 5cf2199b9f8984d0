use std::collections::VecDeque;

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::likelihood::{energy, InverseProblem};
use crate::scalar::{dot, norm, Real};

#[derive(Debug, Clone)]
pub struct MapOptions<T> {
    pub max_iterations: usize,
    /// Absolute bound on `|∇H|`; `None` means `1e-6 sqrt(dim)`.
    pub gradient_tolerance: Option<T>,
    /// Number of L-BFGS correction pairs kept.
    pub history: usize,
    pub max_backtracks: usize,
}

impl<T: Real> Default for MapOptions<T> {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            gradient_tolerance: None,
            history: 20,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult<T> {
    pub theta: Vec<T>,
    pub value: T,
    pub gradient_norm: T,
    pub iterations: usize,
    /// `false` when the iteration cap or a stalled line search ended the run;
    /// `theta` is then the best point found.
    pub converged: bool,
    /// `H` after every accepted step, starting with the initial point.
    pub value_history: Vec<T>,
}

const ARMIJO: f64 = 1e-4;
const APPROX_WOLFE: f64 = 0.1;

/// Minimizes `H(d, x)` with L-BFGS and Armijo backtracking.
pub fn map_estimate<T: Real, P: InverseProblem<T>>(
    problem: &P,
    init: &[T],
    options: &MapOptions<T>,
) -> Result<MapResult<T>> {
    let dim = problem.latent_dim();
    if init.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: init.len(),
            context: "MAP initial point",
        });
    }
    if options.history == 0 {
        return Err(Error::InvalidParameter("L-BFGS history must be positive".into()));
    }
    let tol = options
        .gradient_tolerance
        .unwrap_or_else(|| T::lit(1e-6 * (dim as f64).sqrt()));

    let mut x = init.to_vec();
    let (e, _) = energy(problem, &x)?;
    let mut value = e.value;
    let mut grad = e.gradient;
    let mut history = vec![value];
    let mut pairs: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = norm(&grad) <= tol;

    while !converged && iterations < options.max_iterations {
        let mut direction = two_loop(&grad, &pairs);
        let mut slope = dot(&grad, &direction);
        if slope >= T::zero() {
            pairs.clear();
            direction = grad.iter().map(|&g| -g).collect();
            slope = dot(&grad, &direction);
        }
        let step = line_search(problem, &x, value, slope, &direction, first_step(&pairs, &grad), options.max_backtracks)?;
        let (alpha, new_value, new_grad) = match step {
            Some(s) => s,
            None if !pairs.is_empty() => {
                // curvature memory misled the search; retry along -∇H
                pairs.clear();
                direction = grad.iter().map(|&g| -g).collect();
                slope = dot(&grad, &direction);
                match line_search(problem, &x, value, slope, &direction, first_step(&pairs, &grad), options.max_backtracks)? {
                    Some(s) => s,
                    None => break,
                }
            }
            None => break,
        };
        let s: Vec<T> = direction.iter().map(|&d| d * alpha).collect();
        let y: Vec<T> = new_grad.iter().zip(&grad).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi = *xi + *si;
        }
        if sy > T::epsilon() * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == options.history {
                pairs.pop_front();
            }
            pairs.push_back((s, y, T::one() / sy));
        }
        value = new_value;
        grad = new_grad;
        history.push(value);
        iterations += 1;
        converged = norm(&grad) <= tol;
        debug!("map iteration {iterations}: H = {value}, |grad| = {}", norm(&grad));
    }
    if !converged {
        warn!(
            "MAP stopped after {iterations} iterations with |grad| = {} (tolerance {tol})",
            norm(&grad)
        );
    }
    Ok(MapResult {
        theta: x,
        value,
        gradient_norm: norm(&grad),
        iterations,
        converged,
        value_history: history,
    })
}

/// Without curvature memory the first trial step is capped at unit length.
fn first_step<T: Real>(pairs: &VecDeque<(Vec<T>, Vec<T>, T)>, grad: &[T]) -> T {
    if pairs.is_empty() {
        T::one().min(T::one() / norm(grad))
    } else {
        T::one()
    }
}

/// `-H_k ∇H` from the stored correction pairs.
fn two_loop<T: Real>(grad: &[T], pairs: &VecDeque<(Vec<T>, Vec<T>, T)>) -> Vec<T> {
    let mut q: Vec<T> = grad.iter().map(|&g| -g).collect();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = *rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi = *qi - a * *yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi = *qi * gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi = *qi + (a - b) * *si;
        }
    }
    q
}

type Accepted<T> = (T, T, Vec<T>);

/// Backtracking from `alpha`. Besides the Armijo test, a step is accepted
/// when the change in `H` is below roundoff and the directional derivative
/// shows the minimum along the line has not been overshot by much; this lets
/// the search make progress once decreases are no longer resolvable.
fn line_search<T: Real, P: InverseProblem<T>>(
    problem: &P,
    x: &[T],
    value: T,
    slope: T,
    direction: &[T],
    mut alpha: T,
    max_backtracks: usize,
) -> Result<Option<Accepted<T>>> {
    let half = T::lit(0.5);
    let roundoff = T::lit(64.0) * T::epsilon() * value.abs().max(T::one());
    for _ in 0..max_backtracks {
        let trial: Vec<T> = x.iter().zip(direction).map(|(&a, &d)| a + alpha * d).collect();
        match energy(problem, &trial) {
            Ok((e, _)) => {
                let armijo = e.value <= value + T::lit(ARMIJO) * alpha * slope;
                let flat = (e.value - value).abs() <= roundoff
                    && dot(&e.gradient, direction) <= -T::lit(1.0 - 2.0 * APPROX_WOLFE) * slope;
                if armijo || flat {
                    return Ok(Some((alpha, e.value, e.gradient)));
                }
            }
            Err(Error::SpectrumOverflow { .. }) | Err(Error::NonFinite(_)) => {}
            Err(other) => return Err(other),
        }
        alpha = alpha * half;
    }
    Ok(None)
}

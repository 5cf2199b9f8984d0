//! Invariant suite run against a configured model: adjoint consistency,
//! finite-difference gradients, prior standardization and Fisher metric
//! positivity.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::ValidationConfig;
use crate::error::Result;
use crate::likelihood::{energy, energy_value, Dataset, FisherMetric, InverseProblem, ModelLikelihood, NoiseModel};
use crate::linop::{adjoint_test, LinearOperator};
use crate::model::{GenerativeModel, LatentVector};
use crate::rng;
use crate::scalar::dot;

const PURPOSE_VALIDATION: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed statistic, compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:<6} {:>12} {:>12}  detail", "check", "result", "value", "threshold")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<22} {:<6} {:>12.3e} {:>12.3e}  {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.value,
                c.threshold,
                c.detail
            )?;
        }
        Ok(())
    }
}

fn check(name: &'static str, value: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult {
        name,
        // NaN never passes
        passed: value <= threshold,
        value,
        threshold,
        detail,
    }
}

fn latent(model: &GenerativeModel<f64>, seed: u64, outer: u32, index: u32) -> LatentVector<f64> {
    model.sample_latent(seed, rng::stream_id(PURPOSE_VALIDATION, outer, index))
}

/// Data drawn from the model at a random latent point.
fn synthetic_data(model: &GenerativeModel<f64>, sigma: f64, seed: u64) -> Result<Dataset<f64>> {
    let truth = latent(model, seed, 0, 0);
    let clean = model.forward(&truth)?.d_prime;
    let mut r = rng::stream(seed, rng::stream_id(PURPOSE_VALIDATION, 1, 0));
    let noise: Vec<f64> = rng::standard_normal_vec(&mut r, clean.len());
    let d = clean.iter().zip(&noise).map(|(c, n)| c + sigma * n).collect();
    Dataset::new(d, NoiseModel::white(sigma, clean.len())?)
}

/// Runs every check. Numerical errors inside a check surface as `Err`.
pub fn validate_model(model: &GenerativeModel<f64>, cfg: &ValidationConfig, seed: u64) -> Result<ValidationReport> {
    let data = synthetic_data(model, cfg.noise_sigma, seed)?;
    let problem = ModelLikelihood::new(model, &data)?;
    Ok(ValidationReport {
        checks: vec![
            response_adjoint(model, cfg, seed),
            jacobian_duality(model, cfg, seed)?,
            gradient(&problem, model, cfg, seed)?,
            standardization(model, cfg, seed)?,
            fisher_positivity(&problem, model, cfg, seed)?,
            fisher_symmetry(&problem, model, cfg, seed)?,
        ],
    })
}

fn response_adjoint(model: &GenerativeModel<f64>, cfg: &ValidationConfig, seed: u64) -> CheckResult {
    let err = adjoint_test(model.response(), cfg.adjoint_trials, seed);
    check(
        "response_adjoint",
        err,
        cfg.adjoint_tolerance,
        format!("{} random pairs", cfg.adjoint_trials),
    )
}

fn jacobian_duality(model: &GenerativeModel<f64>, cfg: &ValidationConfig, seed: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for i in 0..cfg.fisher_points {
        let pass = model.forward(&latent(model, seed, 2, i as u32))?;
        worst = worst.max(adjoint_test(&model.data_jacobian(&pass), cfg.adjoint_trials, seed ^ i as u64));
    }
    Ok(check(
        "jacobian_duality",
        worst,
        cfg.adjoint_tolerance,
        format!("JVP/VJP pairs at {} points", cfg.fisher_points),
    ))
}

fn gradient(
    problem: &ModelLikelihood<'_, f64>,
    model: &GenerativeModel<f64>,
    cfg: &ValidationConfig,
    seed: u64,
) -> Result<CheckResult> {
    let h = cfg.gradient_step;
    let errors: Vec<f64> = (0..cfg.gradient_points)
        .into_par_iter()
        .map(|i| {
            let x = latent(model, seed, 3, i as u32).to_flat();
            let v = latent(model, seed, 4, i as u32).to_flat();
            let (e, _) = energy(problem, &x)?;
            let shifted = |sign: f64| -> Vec<f64> { x.iter().zip(&v).map(|(a, b)| a + sign * h * b).collect() };
            let fd = (energy_value(problem, &shifted(1.0))? - energy_value(problem, &shifted(-1.0))?) / (2.0 * h);
            let an = dot(&e.gradient, &v);
            Ok((fd - an).abs() / an.abs().max(fd.abs()).max(f64::MIN_POSITIVE))
        })
        .collect::<Result<_>>()?;
    let failures = errors.iter().filter(|&&e| !(e <= cfg.gradient_tolerance)).count();
    let failed_fraction = failures as f64 / errors.len().max(1) as f64;
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    Ok(check(
        "gradient",
        failed_fraction,
        1.0 - cfg.gradient_pass_fraction,
        format!(
            "{failures}/{} points above rel. error {:.0e}; worst {worst:.2e}",
            errors.len(),
            cfg.gradient_tolerance
        ),
    ))
}

/// Empirical lag covariances of prior draws at the mean spectrum against
/// the exact ones from the linear map `xi -> phi`.
fn standardization(model: &GenerativeModel<f64>, cfg: &ValidationConfig, seed: u64) -> Result<CheckResult> {
    let grid = model.grid();
    let ndim = grid.ndim();
    let mut lags: Vec<Vec<usize>> = vec![vec![0; ndim]];
    for axis in 0..ndim {
        let mut lag = vec![0; ndim];
        lag[axis] = 1 % grid.shape()[axis];
        lags.push(lag);
    }
    lags.push(vec![1; ndim].iter().zip(grid.shape()).map(|(l, n)| l % n).collect());
    let shifted: Vec<Vec<usize>> = lags
        .iter()
        .map(|lag| {
            (0..grid.size())
                .map(|x| {
                    let m: Vec<usize> = grid
                        .unravel(x)
                        .iter()
                        .zip(lag)
                        .zip(grid.shape())
                        .map(|((a, b), n)| (a + b) % n)
                        .collect();
                    grid.ravel(&m)
                })
                .collect()
        })
        .collect();

    let zeta = LatentVector::zeros(model.layout());
    let pass = model.forward(&zeta)?;
    let jac = model.field_jacobian(&pass);
    let excitation = |pixel: usize| -> LatentVector<f64> {
        let mut e = vec![0.0; grid.size()];
        e[pixel] = 1.0;
        let mut row = LatentVector::from_flat(model.layout(), &jac.adjoint_apply(&e)).expect("latent length");
        row.eta.iter_mut().for_each(|x| *x = 0.0);
        row
    };
    let origin = excitation(0);
    let exact: Vec<f64> = shifted.iter().map(|s| origin.dot(&excitation(s[0]))).collect();

    let draws = cfg.standardization_draws.max(1);
    let per_draw: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|i| {
            let mut z = latent(model, seed, 5, i as u32);
            z.eta.iter_mut().for_each(|x| *x = 0.0);
            let phi = model.forward(&z)?.phi.into_values();
            Ok(shifted
                .iter()
                .map(|s| s.iter().enumerate().map(|(x, &y)| phi[x] * phi[y]).sum::<f64>() / grid.size() as f64)
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut empirical = vec![0.0; lags.len()];
    for d in &per_draw {
        for (e, v) in empirical.iter_mut().zip(d) {
            *e += v / draws as f64;
        }
    }
    let scale = exact[0].abs().max(f64::MIN_POSITIVE);
    let worst = empirical
        .iter()
        .zip(&exact)
        .map(|(e, x)| (e - x).abs() / scale)
        .fold(0.0, f64::max);
    Ok(check(
        "standardization",
        worst,
        cfg.standardization_tolerance,
        format!("{} lags, {draws} draws, relative to zero-lag variance {:.3e}", lags.len(), exact[0]),
    ))
}

fn fisher_probes(model: &GenerativeModel<f64>, seed: u64, point: usize, cfg: &ValidationConfig) -> Vec<Vec<f64>> {
    (0..cfg.fisher_probes)
        .map(|j| latent(model, seed ^ (point as u64 + 1), 7, j as u32).to_flat())
        .collect()
}

/// Largest violation of `v†(1 + M)v >= |v|^2`, relative to `|v|^2`.
fn fisher_positivity(
    problem: &ModelLikelihood<'_, f64>,
    model: &GenerativeModel<f64>,
    cfg: &ValidationConfig,
    seed: u64,
) -> Result<CheckResult> {
    let dim = model.latent_dim();
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for i in 0..cfg.fisher_points {
        let point = problem.linearize(&latent(model, seed, 6, i as u32).to_flat())?;
        let metric = FisherMetric::new(&point, problem.data().noise(), dim);
        for v in fisher_probes(model, seed, i, cfg) {
            let vv = dot(&v, &v);
            let quad = vv + dot(&v, &metric.apply(&v));
            let deficit = (vv - quad) / vv;
            if deficit > 0.0 {
                violations += 1;
            }
            worst = worst.max(deficit);
        }
    }
    Ok(check(
        "fisher_psd",
        worst,
        0.0,
        format!(
            "{violations} violations in {} probes",
            cfg.fisher_points * cfg.fisher_probes
        ),
    ))
}

fn fisher_symmetry(
    problem: &ModelLikelihood<'_, f64>,
    model: &GenerativeModel<f64>,
    cfg: &ValidationConfig,
    seed: u64,
) -> Result<CheckResult> {
    let dim = model.latent_dim();
    let mut worst: f64 = 0.0;
    for i in 0..cfg.fisher_points {
        let point = problem.linearize(&latent(model, seed, 6, i as u32).to_flat())?;
        let metric = FisherMetric::new(&point, problem.data().noise(), dim);
        let probes = fisher_probes(model, seed, i, cfg);
        for pair in probes.chunks_exact(2) {
            let (v, w) = (&pair[0], &pair[1]);
            let a = dot(&metric.apply(v), w);
            let b = dot(v, &metric.apply(w));
            worst = worst.max((a - b).abs() / (a.abs() + b.abs()).max(f64::MIN_POSITIVE));
        }
    }
    Ok(check(
        "fisher_self_adjoint",
        worst,
        cfg.fisher_symmetry_tolerance,
        format!("probe pairs at {} points", cfg.fisher_points),
    ))
}

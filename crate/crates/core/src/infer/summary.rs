use rayon::prelude::*;
use serde::Serialize;

use super::PosteriorApprox;
use crate::error::{Error, Result};
use crate::likelihood::NoiseModel;
use crate::linop::LinearOperator;
use crate::model::{ForwardPass, GenerativeModel, LatentVector};
use crate::scalar::Real;

/// Field-space statistics of a posterior approximation.
#[derive(Debug, Clone)]
pub struct PosteriorSummary<T> {
    pub theta_pass: ForwardPass<T>,
    /// Signal `s` of every sample point; just `s(θ)` without samples.
    pub sample_s: Vec<Vec<T>>,
    pub sample_psi: Vec<Vec<T>>,
    pub mean_s: Vec<T>,
    pub std_s: Vec<T>,
    pub mean_phi: Vec<T>,
}

pub fn summarize<T: Real>(model: &GenerativeModel<T>, approx: &PosteriorApprox<T>) -> Result<PosteriorSummary<T>> {
    let layout = model.layout();
    let theta_pass = model.forward(&approx.theta_latent(layout)?)?;
    let points = approx.sample_points();
    let passes: Vec<ForwardPass<T>> = if points.is_empty() {
        vec![theta_pass.clone()]
    } else {
        points
            .par_iter()
            .map(|p| model.forward(&LatentVector::from_flat(layout, p)?))
            .collect::<Result<_>>()?
    };
    let n = T::lit(passes.len() as f64);
    let size = model.grid().size();
    let mut mean_s = vec![T::zero(); size];
    let mut mean_phi = vec![T::zero(); size];
    for p in &passes {
        for i in 0..size {
            mean_s[i] = mean_s[i] + p.s.values()[i] / n;
            mean_phi[i] = mean_phi[i] + p.phi.values()[i] / n;
        }
    }
    let mut var = vec![T::zero(); size];
    for p in &passes {
        for i in 0..size {
            let d = p.s.values()[i] - mean_s[i];
            var[i] = var[i] + d * d / n;
        }
    }
    Ok(PosteriorSummary {
        theta_pass,
        sample_psi: passes.iter().map(|p| p.psi.clone()).collect(),
        sample_s: passes.into_iter().map(|p| p.s.into_values()).collect(),
        mean_s,
        std_s: var.into_iter().map(|v| v.sqrt()).collect(),
        mean_phi,
    })
}

/// Posterior band of the log-spectrum in one bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumBand {
    pub kappa: f64,
    pub mean: f64,
    pub q16: f64,
    pub q84: f64,
    pub prior_std: f64,
    pub posterior_std: f64,
}

/// Linearly interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

pub fn spectrum_bands<T: Real>(model: &GenerativeModel<T>, sample_psi: &[Vec<T>]) -> Vec<SpectrumBand> {
    let amp = model.amplitude_model();
    let n_bins = amp.n_bins();
    let factor = amp.factor();
    model
        .binning()
        .kappa_of_bin()
        .iter()
        .enumerate()
        .map(|(b, &kappa)| {
            let mut v: Vec<f64> = sample_psi.iter().map(|p| p[b].to_f64_lossy()).collect();
            v.sort_by(f64::total_cmp);
            let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64;
            let prior_var: f64 = factor[b * n_bins..(b + 1) * n_bins]
                .iter()
                .map(|x| x.to_f64_lossy().powi(2))
                .sum();
            SpectrumBand {
                kappa,
                mean: m,
                q16: quantile(&v, 0.16),
                q84: quantile(&v, 0.84),
                prior_std: prior_var.sqrt(),
                posterior_std: var.sqrt(),
            }
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Mean diagonal of the Fisher metric `J† N^-1 J` over the field
/// excitations of each spectral bin, evaluated at `pass`.
///
/// The prior contributes unit information per excitation, so values above
/// one mark bins whose modes the data pin down.
pub fn bin_information<T: Real>(model: &GenerativeModel<T>, pass: &ForwardPass<T>, noise: &NoiseModel<T>) -> Vec<f64> {
    let jac = model.data_jacobian(pass);
    let n_xi = model.layout().n_xi;
    let variance = noise.variance();
    let rows: Vec<Vec<T>> = (0..model.data_dim())
        .into_par_iter()
        .map(|i| {
            let mut e = vec![T::zero(); model.data_dim()];
            e[i] = T::one();
            jac.adjoint_apply(&e)
        })
        .collect();
    let mut diag = vec![0.0; n_xi];
    for (row, v) in rows.iter().zip(variance) {
        let v = v.to_f64_lossy();
        for (d, j) in diag.iter_mut().zip(&row[..n_xi]) {
            *d += j.to_f64_lossy().powi(2) / v;
        }
    }
    let binning = model.binning();
    let mut sums = vec![(0.0, 0usize); binning.n_bins()];
    // xi[j] excites mode j + 1
    for (j, &d) in diag.iter().enumerate() {
        if let Some(b) = binning.bin_of_mode()[j + 1] {
            sums[b].0 += d;
            sums[b].1 += 1;
        }
    }
    sums.into_iter().map(|(s, n)| if n == 0 { 0.0 } else { s / n as f64 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    /// A bin counts as constrained when its mean excitation information
    /// (see [`bin_information`]) reaches this value.
    pub information_threshold: f64,
    pub z_limit: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            information_threshold: 1.0,
            z_limit: 3.0,
        }
    }
}

/// Reconstruction quality against a known truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthMetrics {
    pub pearson_mean_vs_truth: f64,
    pub constrained_bins: usize,
    /// Fraction of constrained bins whose true log-power lies in the
    /// 16-84% sample band.
    pub spectrum_band_coverage: f64,
    pub observed_pixels: usize,
    /// Fraction of observed pixels with `|truth - mean| / std <= z_limit`.
    pub pixel_z_fraction: f64,
}

pub fn truth_metrics<T: Real>(
    model: &GenerativeModel<T>,
    noise: &NoiseModel<T>,
    summary: &PosteriorSummary<T>,
    bands: &[SpectrumBand],
    truth_s: &[f64],
    truth_psi: &[f64],
    options: MetricOptions,
) -> Result<TruthMetrics> {
    let size = model.grid().size();
    if truth_s.len() != size || truth_psi.len() != bands.len() {
        return Err(Error::DimensionMismatch {
            expected: size,
            got: truth_s.len(),
            context: "truth fields",
        });
    }
    let mean: Vec<f64> = summary.mean_s.iter().map(|v| v.to_f64_lossy()).collect();
    let information = bin_information(model, &summary.theta_pass, noise);
    let constrained: Vec<usize> = (0..bands.len())
        .filter(|&b| information[b] >= options.information_threshold)
        .collect();
    let covered = constrained
        .iter()
        .filter(|&&b| bands[b].q16 <= truth_psi[b] && truth_psi[b] <= bands[b].q84)
        .count();
    let observed: Vec<usize> = model
        .response()
        .coverage()
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| c.then_some(i))
        .collect();
    let within = observed
        .iter()
        .filter(|&&i| {
            let dev = (truth_s[i] - mean[i]).abs();
            dev <= options.z_limit * summary.std_s[i].to_f64_lossy()
        })
        .count();
    let fraction = |k: usize, n: usize| if n == 0 { f64::NAN } else { k as f64 / n as f64 };
    Ok(TruthMetrics {
        pearson_mean_vs_truth: pearson(&mean, truth_s),
        constrained_bins: constrained.len(),
        spectrum_band_coverage: fraction(covered, constrained.len()),
        observed_pixels: observed.len(),
        pixel_z_fraction: fraction(within, observed.len()),
    })
}

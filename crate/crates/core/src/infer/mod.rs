//! Inference engines for standardized inverse problems.
//!
//! Every engine works on an [`InverseProblem`](crate::likelihood::InverseProblem)
//! with flat latent vectors; the [`GenerativeModel`](crate::model::GenerativeModel)
//! layout is only needed to interpret the result.

mod advi;
mod geovi;
mod map;
mod mgvi;
mod summary;
mod wiener;

use serde::{Deserialize, Serialize};

pub use advi::{advi_mfa, AdviOptions};
pub use geovi::{geovi_constraint_residual, GeoViResidualReport};
pub use map::{map_estimate, MapOptions, MapResult};
pub use mgvi::{mgvi, sample_from_theta_cov, MgviOptions};
pub use summary::{
    bin_information, pearson, quantile, spectrum_bands, summarize, truth_metrics, MetricOptions, PosteriorSummary, SpectrumBand, TruthMetrics,
};
pub use wiener::{wiener_filter, WienerCovariance, WienerPrecision, WienerSolution};

use crate::error::Result;
use crate::model::{LatentLayout, LatentVector};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Map,
    Advi,
    Mgvi,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Map => "map",
            Self::Advi => "advi",
            Self::Mgvi => "mgvi",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "map" => Ok(Self::Map),
            "advi" => Ok(Self::Advi),
            "mgvi" => Ok(Self::Mgvi),
            other => Err(format!("unknown method `{other}` (expected map, advi or mgvi)")),
        }
    }
}

/// Gaussian approximation `Q(x) = G(x - θ, Θ)` returned by every engine.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorApprox<T> {
    pub method: Method,
    pub theta: Vec<T>,
    /// Log standard deviations of the mean-field approximation.
    pub mfa_log_std: Option<Vec<T>>,
    /// Residuals `x - θ` of posterior samples, in `±` pairs for MGVI.
    pub samples: Vec<Vec<T>>,
    /// Sampled KL estimate (entropy terms constant in θ dropped) per outer
    /// iteration, or per step for ADVI.
    pub kl_history: Vec<T>,
    /// Sampled KL after every accepted inner step, one list per outer iteration.
    pub inner_history: Vec<Vec<T>>,
    pub converged: bool,
    pub iterations: usize,
}

impl<T: Real> PosteriorApprox<T> {
    /// Posterior samples `θ + r`.
    pub fn sample_points(&self) -> Vec<Vec<T>> {
        self.samples
            .iter()
            .map(|r| self.theta.iter().zip(r).map(|(&t, &x)| t + x).collect())
            .collect()
    }

    pub fn theta_latent(&self, layout: LatentLayout) -> Result<LatentVector<T>> {
        LatentVector::from_flat(layout, &self.theta)
    }
}

use crate::likelihood::{InverseProblem, RegularizedPrecision};
use crate::error::{Error, Result};
use crate::linop::LinearOperator;
use crate::rng;
use crate::scalar::{norm, Real};

const POWER_STEPS: usize = 30;
const PURPOSE_GEOVI: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoViResidualReport<T> {
    /// Estimate of the operator norm of `T† (1 + M(θ)) T - 1`.
    pub residual_norm: T,
    pub probe_count: usize,
}

/// Checks how well a linear coordinate map `T: y -> x` whitens the
/// approximate posterior at `θ`, i.e. how far `T† Θ^-1 T` is from the
/// identity. `Θ` is evaluated once at `θ`.
///
/// Each probe runs a short power iteration on the symmetric defect; the
/// largest Rayleigh-style estimate over all probes is reported.
pub fn geovi_constraint_residual<T: Real, P: InverseProblem<T>, O: LinearOperator<T> + ?Sized>(
    problem: &P,
    theta: &[T],
    transform: &O,
    probes: usize,
    seed: u64,
) -> Result<GeoViResidualReport<T>> {
    let dim = problem.latent_dim();
    if transform.codomain_dim() != dim || theta.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: transform.codomain_dim(),
            context: "geoVI transform codomain",
        });
    }
    if probes == 0 {
        return Err(Error::InvalidParameter("geoVI check needs at least one probe".into()));
    }
    let point = problem.linearize(theta)?;
    let precision = RegularizedPrecision::new(&point, problem.data().noise(), dim);
    let defect = |v: &[T]| -> Vec<T> {
        let pulled = transform.adjoint_apply(&precision.apply(&transform.apply(v)));
        pulled.iter().zip(v).map(|(&a, &b)| a - b).collect()
    };
    let ydim = transform.domain_dim();
    let mut worst = T::zero();
    for probe in 0..probes {
        let mut r = rng::stream(seed, rng::stream_id(PURPOSE_GEOVI, 0, probe as u32));
        let mut v: Vec<T> = rng::standard_normal_vec(&mut r, ydim);
        let mut estimate = T::zero();
        for _ in 0..POWER_STEPS {
            let nv = norm(&v);
            if nv == T::zero() {
                break;
            }
            v.iter_mut().for_each(|x| *x = *x / nv);
            let ev = defect(&v);
            estimate = norm(&ev);
            v = ev;
        }
        if estimate > worst {
            worst = estimate;
        }
    }
    Ok(GeoViResidualReport {
        residual_norm: worst,
        probe_count: probes,
    })
}

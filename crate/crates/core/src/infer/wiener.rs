use crate::error::{Error, Result};
use crate::likelihood::NoiseModel;
use crate::linop::{cg_solve, CgConfig, CgSolution, LinearOperator, SharedOperator};
use crate::scalar::Real;

/// `D^-1 = 1 + R† N^-1 R`
#[derive(Clone)]
pub struct WienerPrecision<T: Real> {
    response: SharedOperator<T>,
    noise: NoiseModel<T>,
}

impl<T: Real> WienerPrecision<T> {
    pub fn new(response: SharedOperator<T>, noise: NoiseModel<T>) -> Result<Self> {
        if response.codomain_dim() != noise.len() {
            return Err(Error::DimensionMismatch {
                expected: response.codomain_dim(),
                got: noise.len(),
                context: "noise model against response",
            });
        }
        Ok(Self { response, noise })
    }
}

impl<T: Real> LinearOperator<T> for WienerPrecision<T> {
    fn domain_dim(&self) -> usize {
        self.response.domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.response.domain_dim()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        let m = self
            .response
            .adjoint_apply(&self.noise.precision_apply(&self.response.apply(v)));
        v.iter().zip(m).map(|(&a, b)| a + b).collect()
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.apply(w)
    }
}

/// `D = (1 + R† N^-1 R)^-1`, applied by one CG solve per call.
#[derive(Clone)]
pub struct WienerCovariance<T: Real> {
    precision: WienerPrecision<T>,
    cg: CgConfig<T>,
}

impl<T: Real> WienerCovariance<T> {
    pub fn precision(&self) -> &WienerPrecision<T> {
        &self.precision
    }

    pub fn try_apply(&self, v: &[T]) -> Result<Vec<T>> {
        Ok(cg_solve(&self.precision, v, &self.cg)?.solution)
    }
}

impl<T: Real> LinearOperator<T> for WienerCovariance<T> {
    fn domain_dim(&self) -> usize {
        self.precision.domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.precision.domain_dim()
    }
    /// # Panics
    /// If the inner CG solve fails; use [`WienerCovariance::try_apply`] to
    /// handle that case.
    fn apply(&self, v: &[T]) -> Vec<T> {
        self.try_apply(v).expect("Wiener covariance CG solve")
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.apply(w)
    }
}

pub struct WienerSolution<T: Real> {
    pub mean: Vec<T>,
    pub covariance_op: WienerCovariance<T>,
    pub cg_iterations: usize,
    pub cg_residual_history: Vec<T>,
}

impl<T: Real> std::fmt::Debug for WienerSolution<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WienerSolution")
            .field("mean", &self.mean)
            .field("cg_iterations", &self.cg_iterations)
            .finish_non_exhaustive()
    }
}

/// Exact posterior of `d = R x + n` under a unit Gaussian prior on `x`:
/// `m = D R† N^-1 d`.
pub fn wiener_filter<T: Real>(
    response: SharedOperator<T>,
    noise: &NoiseModel<T>,
    d: &[T],
    cg: &CgConfig<T>,
) -> Result<WienerSolution<T>> {
    if d.len() != response.codomain_dim() {
        return Err(Error::DimensionMismatch {
            expected: response.codomain_dim(),
            got: d.len(),
            context: "data vector against response",
        });
    }
    let j = response.adjoint_apply(&noise.precision_apply(d));
    let precision = WienerPrecision::new(response, noise.clone())?;
    let CgSolution {
        solution,
        iterations,
        residual_history,
        ..
    } = cg_solve(&precision, &j, cg)?;
    Ok(WienerSolution {
        mean: solution,
        covariance_op: WienerCovariance {
            precision,
            cg: cg.clone(),
        },
        cg_iterations: iterations,
        cg_residual_history: residual_history,
    })
}

//! Standardized generative field models, matrix-free operators, and
//! variational inference for spatially correlated signals.

pub mod dynamics;
pub mod config;
pub mod error;
pub mod grid;
pub mod infer;
pub mod io;
pub mod likelihood;
pub mod linop;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod validation;

pub use error::{Error, Result};
pub use grid::{build_binning, harmonic_transform, inverse_transform, Field, Grid, HarmonicField, HarmonicTransform, ModeBinning};
pub use likelihood::{
    energy, fisher_metric_apply, hamiltonian, joint_hamiltonian, regularized_precision_apply, Dataset, InverseProblem,
    LinearGaussianProblem, Linearization, ModelLikelihood, NoiseModel,
};
pub use linop::{adjoint_test, cg_solve, CgConfig, CgSolution, LinearOperator};
pub use model::{
    Chord, ForwardPass, GenerativeModel, LatentVector, LinearModelOperator, PointwiseNonlinearity, Response, ResponseSpec, SpectrumInterpolation,
    SpectrumPrior,
};
pub use config::Config;
pub use infer::{Method, PosteriorApprox};
pub use scalar::Real;

pub type Field64 = Field<f64>;
pub type Field32 = Field<f32>;
pub type HarmonicField64 = HarmonicField<f64>;
pub type HarmonicField32 = HarmonicField<f32>;
pub type Model64 = GenerativeModel<f64>;
pub type Model32 = GenerativeModel<f32>;
pub type Latent64 = LatentVector<f64>;
pub type Latent32 = LatentVector<f32>;

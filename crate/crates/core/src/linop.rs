//! Matrix-free linear operators and a conjugate gradient solver.
//!
//! Operators act on flat slices and are never stored as matrices outside of
//! [`DenseOperator`], which exists for small oracles and explicit transforms.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{axpy, dot, norm, Real};

/// A linear map together with its adjoint.
pub trait LinearOperator<T: Real>: Send + Sync {
    fn domain_dim(&self) -> usize;
    fn codomain_dim(&self) -> usize;
    fn apply(&self, v: &[T]) -> Vec<T>;
    fn adjoint_apply(&self, w: &[T]) -> Vec<T>;
}

impl<T: Real, O: LinearOperator<T> + ?Sized> LinearOperator<T> for &O {
    fn domain_dim(&self) -> usize {
        (**self).domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        (**self).codomain_dim()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        (**self).apply(v)
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        (**self).adjoint_apply(w)
    }
}

impl<T: Real, O: LinearOperator<T> + ?Sized> LinearOperator<T> for Arc<O> {
    fn domain_dim(&self) -> usize {
        (**self).domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        (**self).codomain_dim()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        (**self).apply(v)
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        (**self).adjoint_apply(w)
    }
}

impl<T: Real, O: LinearOperator<T> + ?Sized> LinearOperator<T> for Box<O> {
    fn domain_dim(&self) -> usize {
        (**self).domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        (**self).codomain_dim()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        (**self).apply(v)
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        (**self).adjoint_apply(w)
    }
}

pub type SharedOperator<T> = Arc<dyn LinearOperator<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityOperator {
    dim: usize,
}

impl IdentityOperator {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl<T: Real> LinearOperator<T> for IdentityOperator {
    fn domain_dim(&self) -> usize {
        self.dim
    }
    fn codomain_dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        v.to_vec()
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        w.to_vec()
    }
}

/// `diag(d)`; self-adjoint, positive definite iff every entry is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalOperator<T> {
    diagonal: Vec<T>,
}

impl<T: Real> DiagonalOperator<T> {
    pub fn new(diagonal: Vec<T>) -> Self {
        Self { diagonal }
    }

    pub fn diagonal(&self) -> &[T] {
        &self.diagonal
    }

    pub fn is_positive_definite(&self) -> bool {
        self.diagonal.iter().all(|&d| d > T::zero())
    }

    pub fn inverse(&self) -> Result<Self> {
        if self.diagonal.iter().any(|&d| d == T::zero()) {
            return Err(Error::InvalidParameter("singular diagonal operator".into()));
        }
        Ok(Self::new(self.diagonal.iter().map(|&d| T::one() / d).collect()))
    }

    /// Elementwise product; equals the composition of the two operators.
    pub fn product(&self, other: &Self) -> Result<Self> {
        if self.diagonal.len() != other.diagonal.len() {
            return Err(Error::DimensionMismatch {
                expected: self.diagonal.len(),
                got: other.diagonal.len(),
                context: "diagonal product",
            });
        }
        Ok(Self::new(
            self.diagonal.iter().zip(&other.diagonal).map(|(&a, &b)| a * b).collect(),
        ))
    }
}

impl<T: Real> LinearOperator<T> for DiagonalOperator<T> {
    fn domain_dim(&self) -> usize {
        self.diagonal.len()
    }
    fn codomain_dim(&self) -> usize {
        self.diagonal.len()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        v.iter().zip(&self.diagonal).map(|(&x, &d)| x * d).collect()
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.apply(w)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseOperator<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
                context: "dense matrix entries",
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Materializes an operator column by column.
    pub fn from_operator<O: LinearOperator<T> + ?Sized>(op: &O) -> Self {
        let (rows, cols) = (op.codomain_dim(), op.domain_dim());
        let mut data = vec![T::zero(); rows * cols];
        let mut e = vec![T::zero(); cols];
        for j in 0..cols {
            e[j] = T::one();
            let col = op.apply(&e);
            for i in 0..rows {
                data[i * cols + j] = col[i];
            }
            e[j] = T::zero();
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![T::zero(); self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

impl<T: Real> LinearOperator<T> for DenseOperator<T> {
    fn domain_dim(&self) -> usize {
        self.cols
    }
    fn codomain_dim(&self) -> usize {
        self.rows
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        self.data.chunks(self.cols).map(|row| dot(row, v)).collect()
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for (row, &wi) in self.data.chunks(self.cols).zip(w) {
            axpy(wi, row, &mut out);
        }
        out
    }
}

type VecMap<T> = Box<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;

/// Operator defined by a pair of closures.
pub struct FnOperator<T> {
    domain_dim: usize,
    codomain_dim: usize,
    apply: VecMap<T>,
    adjoint: VecMap<T>,
}

impl<T: Real> FnOperator<T> {
    pub fn new(
        domain_dim: usize,
        codomain_dim: usize,
        apply: impl Fn(&[T]) -> Vec<T> + Send + Sync + 'static,
        adjoint: impl Fn(&[T]) -> Vec<T> + Send + Sync + 'static,
    ) -> Self {
        Self {
            domain_dim,
            codomain_dim,
            apply: Box::new(apply),
            adjoint: Box::new(adjoint),
        }
    }

    /// Self-adjoint operator from a single closure.
    pub fn symmetric(dim: usize, apply: impl Fn(&[T]) -> Vec<T> + Send + Sync + Clone + 'static) -> Self {
        Self::new(dim, dim, apply.clone(), apply)
    }
}

impl<T: Real> LinearOperator<T> for FnOperator<T> {
    fn domain_dim(&self) -> usize {
        self.domain_dim
    }
    fn codomain_dim(&self) -> usize {
        self.codomain_dim
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        (self.apply)(v)
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        (self.adjoint)(w)
    }
}

/// `outer ∘ inner`: applies `inner` first.
pub struct ComposedOperator<A, B> {
    outer: A,
    inner: B,
}

impl<T: Real, A: LinearOperator<T>, B: LinearOperator<T>> LinearOperator<T> for ComposedOperator<A, B> {
    fn domain_dim(&self) -> usize {
        self.inner.domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.outer.codomain_dim()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        self.outer.apply(&self.inner.apply(v))
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.inner.adjoint_apply(&self.outer.adjoint_apply(w))
    }
}

/// Composition `a ∘ b`.
pub fn compose<T: Real, A: LinearOperator<T>, B: LinearOperator<T>>(
    a: A,
    b: B,
) -> Result<ComposedOperator<A, B>> {
    if b.codomain_dim() != a.domain_dim() {
        return Err(Error::DimensionMismatch {
            expected: a.domain_dim(),
            got: b.codomain_dim(),
            context: "operator composition",
        });
    }
    Ok(ComposedOperator { outer: a, inner: b })
}

/// `a + b`
pub struct SumOperator<A, B> {
    a: A,
    b: B,
}

impl<T: Real, A: LinearOperator<T>, B: LinearOperator<T>> LinearOperator<T> for SumOperator<A, B> {
    fn domain_dim(&self) -> usize {
        self.a.domain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.a.codomain_dim()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        let mut out = self.a.apply(v);
        axpy(T::one(), &self.b.apply(v), &mut out);
        out
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        let mut out = self.a.adjoint_apply(w);
        axpy(T::one(), &self.b.adjoint_apply(w), &mut out);
        out
    }
}

pub fn sum<T: Real, A: LinearOperator<T>, B: LinearOperator<T>>(a: A, b: B) -> Result<SumOperator<A, B>> {
    if a.domain_dim() != b.domain_dim() || a.codomain_dim() != b.codomain_dim() {
        return Err(Error::DimensionMismatch {
            expected: a.domain_dim(),
            got: b.domain_dim(),
            context: "operator sum",
        });
    }
    Ok(SumOperator { a, b })
}

/// `A†` as an operator in its own right.
pub struct AdjointOperator<A>(pub A);

impl<T: Real, A: LinearOperator<T>> LinearOperator<T> for AdjointOperator<A> {
    fn domain_dim(&self) -> usize {
        self.0.codomain_dim()
    }
    fn codomain_dim(&self) -> usize {
        self.0.domain_dim()
    }
    fn apply(&self, v: &[T]) -> Vec<T> {
        self.0.adjoint_apply(v)
    }
    fn adjoint_apply(&self, w: &[T]) -> Vec<T> {
        self.0.apply(w)
    }
}

/// Worst relative mismatch of `<A v, w>` against `<v, A† w>` over random
/// Gaussian pairs.
pub fn adjoint_test<T: Real, O: LinearOperator<T> + ?Sized>(op: &O, trials: usize, seed: u64) -> T {
    let tiny = T::min_positive_value().sqrt();
    let mut worst = T::zero();
    for trial in 0..trials.max(1) {
        let mut r = rng::stream(seed, trial as u64);
        let v: Vec<T> = rng::standard_normal_vec(&mut r, op.domain_dim());
        let w: Vec<T> = rng::standard_normal_vec(&mut r, op.codomain_dim());
        let lhs = dot(&op.apply(&v), &w);
        let rhs = dot(&v, &op.adjoint_apply(&w));
        let err = (lhs - rhs).abs() / (lhs.abs() + rhs.abs() + tiny);
        worst = worst.max(err);
    }
    worst
}

/// Settings for [`cg_solve`].
#[derive(Clone)]
pub struct CgConfig<T: Real> {
    pub max_iterations: usize,
    pub relative_residual_tolerance: T,
    pub absolute_tolerance: T,
    /// Symmetric positive definite approximation of the inverse operator.
    pub preconditioner: Option<SharedOperator<T>>,
}

impl<T: Real> std::fmt::Debug for CgConfig<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CgConfig")
            .field("max_iterations", &self.max_iterations)
            .field("relative_residual_tolerance", &self.relative_residual_tolerance)
            .field("absolute_tolerance", &self.absolute_tolerance)
            .field("preconditioned", &self.preconditioner.is_some())
            .finish()
    }
}

impl<T: Real> CgConfig<T> {
    pub fn new(max_iterations: usize, relative_residual_tolerance: T) -> Self {
        Self {
            max_iterations,
            relative_residual_tolerance,
            absolute_tolerance: T::zero(),
            preconditioner: None,
        }
    }

    /// Relative tolerance 1e-6 and `min(10 n, 2000)` iterations.
    pub fn for_dimension(dim: usize) -> Self {
        Self::new((10 * dim).clamp(1, 2000), T::lit(1e-6))
    }

    pub fn with_tolerance(mut self, tol: T) -> Self {
        self.relative_residual_tolerance = tol;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let tol = self.relative_residual_tolerance;
        if !(tol > T::zero() && tol < T::one()) {
            return Err(Error::InvalidParameter(format!(
                "relative CG tolerance must lie in (0, 1), got {tol}"
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("CG needs at least one iteration".into()));
        }
        if self.absolute_tolerance < T::zero() {
            return Err(Error::InvalidParameter("absolute tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution<T> {
    pub solution: Vec<T>,
    pub iterations: usize,
    pub final_residual: T,
    /// Norm of the reported residual after every iteration (index 0 is the start).
    pub residual_history: Vec<T>,
}

/// Solves `op x = rhs` for symmetric positive definite `op` with zero start.
pub fn cg_solve<T: Real, O: LinearOperator<T> + ?Sized>(
    op: &O,
    rhs: &[T],
    config: &CgConfig<T>,
) -> Result<CgSolution<T>> {
    cg_solve_from(op, rhs, None, config)
}

/// Preconditioned Hestenes–Stiefel conjugate gradients.
///
/// The reported iterate is smoothed by minimal-residual smoothing so that the
/// residual history is nonincreasing; the raw CG recurrence is unchanged.
/// Non-positive curvature `p† A p <= 0` aborts with [`Error::NegativeCurvature`].
pub fn cg_solve_from<T: Real, O: LinearOperator<T> + ?Sized>(
    op: &O,
    rhs: &[T],
    initial: Option<&[T]>,
    config: &CgConfig<T>,
) -> Result<CgSolution<T>> {
    config.validate()?;
    let n = op.domain_dim();
    if op.codomain_dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: op.codomain_dim(),
            context: "CG needs a square operator",
        });
    }
    if rhs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: rhs.len(),
            context: "CG right-hand side",
        });
    }
    if !rhs.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("CG right-hand side"));
    }

    let mut x = match initial {
        Some(x0) => x0.to_vec(),
        None => vec![T::zero(); n],
    };
    let mut r = rhs.to_vec();
    if initial.is_some() {
        let ax = op.apply(&x);
        axpy(-T::one(), &ax, &mut r);
    }
    let threshold = config.relative_residual_tolerance * norm(rhs) + config.absolute_tolerance;

    // smoothed iterate and residual
    let mut y = x.clone();
    let mut s = r.clone();
    let mut s_norm = norm(&s);
    let mut history = vec![s_norm];
    if s_norm <= threshold {
        return Ok(CgSolution {
            solution: y,
            iterations: 0,
            final_residual: s_norm,
            residual_history: history,
        });
    }

    let precondition = |r: &[T]| match &config.preconditioner {
        Some(m) => m.apply(r),
        None => r.to_vec(),
    };
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);

    for iteration in 1..=config.max_iterations {
        let ap = op.apply(&p);
        let curvature = dot(&p, &ap);
        if !(curvature > T::zero()) {
            return Err(Error::NegativeCurvature {
                iteration,
                curvature: curvature.to_f64_lossy(),
            });
        }
        let alpha = rz / curvature;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);

        // minimal residual smoothing
        let diff: Vec<T> = r.iter().zip(&s).map(|(&a, &b)| a - b).collect();
        let diff_sq = dot(&diff, &diff);
        if diff_sq > T::zero() {
            let eta = -dot(&s, &diff) / diff_sq;
            axpy(eta, &diff, &mut s);
            for (yi, &xi) in y.iter_mut().zip(&x) {
                *yi = *yi + eta * (xi - *yi);
            }
        }
        s_norm = norm(&s);
        history.push(s_norm);
        if !s_norm.is_finite() {
            return Err(Error::NonFinite("CG residual"));
        }

        if s_norm <= threshold {
            let mut true_residual = rhs.to_vec();
            axpy(-T::one(), &op.apply(&y), &mut true_residual);
            return Ok(CgSolution {
                solution: y,
                iterations: iteration,
                final_residual: norm(&true_residual),
                residual_history: history,
            });
        }

        z = precondition(&r);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for (pi, &zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Err(Error::CgNotConverged {
        iterations: config.max_iterations,
        residual: s_norm.to_f64_lossy(),
    })
}

/// Lower Cholesky factor of a symmetric positive definite row-major matrix.
pub fn cholesky<T: Real>(matrix: &[T], n: usize) -> Result<Vec<T>> {
    if matrix.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            got: matrix.len(),
            context: "Cholesky input",
        });
    }
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = matrix[i * n + j];
            for k in 0..j {
                acc = acc - l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(acc > T::zero()) {
                    return Err(Error::InvalidParameter(format!(
                        "matrix not positive definite at pivot {i}"
                    )));
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Ok(l)
}

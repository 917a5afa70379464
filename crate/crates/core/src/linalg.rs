//! Small dense linear-algebra helpers shared by the solvers.
//!
//! Everything here wraps nalgebra on dynamically sized matrices; the only
//! additions are the conventions the solvers rely on (sorted symmetric
//! eigendecompositions, log-determinants through Cholesky factors, and
//! eigenvalue clipping for nearly semidefinite matrices).

use nalgebra::DMatrix;
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;

/// Largest absolute entry, zero for empty matrices.
pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
}

/// Largest absolute difference between a matrix and its transpose.
pub fn asymmetry<T: Real>(m: &DMatrix<T>) -> T {
    let mut worst = T::zero();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `(M + M^T) / 2`.
pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::of(0.5);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        (m[(i, j)] + m[(j, i)]) * half
    })
}

/// Frobenius norm.
pub fn frobenius<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Frobenius inner product `<A, B> = tr(A^T B)`.
pub fn dot<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
///
/// Columns of `vectors` follow the sort, so `m = V diag(values) V^T`.
pub struct SymEigen<T: Real> {
    pub values: Vec<T>,
    pub vectors: DMatrix<T>,
}

/// Decomposes a symmetric matrix; the input is symmetrized first so callers
/// can pass matrices with roundoff-level asymmetry.
pub fn sym_eigen<T: Real>(m: &DMatrix<T>) -> SymEigen<T> {
    let se = symmetrize(m).symmetric_eigen();
    let n = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[a]
            .partial_cmp(&se.eigenvalues[b])
            .expect("NaN eigenvalue")
    });
    let values = order.iter().map(|&k| se.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |i, j| se.eigenvectors[(i, order[j])]);
    SymEigen { values, vectors }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigenvalue_range<T: Real>(m: &DMatrix<T>) -> (T, T) {
    let eig = sym_eigen(m);
    (eig.values[0], eig.values[eig.values.len() - 1])
}

/// `log det M` through a Cholesky factor; `None` if M is not positive
/// definite to working precision.
pub fn cholesky_logdet<T: Real>(m: &DMatrix<T>) -> Option<T> {
    let chol = nalgebra::Cholesky::new(m.clone())?;
    let l = chol.l();
    let mut acc = T::zero();
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    Some(acc + acc)
}

/// Solves `M X = B` for symmetric positive definite `M`.
pub fn solve_spd<T: Real>(m: &DMatrix<T>, rhs: &DMatrix<T>) -> Option<DMatrix<T>> {
    Some(nalgebra::Cholesky::new(m.clone())?.solve(rhs))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse<T: Real>(m: &DMatrix<T>) -> Option<DMatrix<T>> {
    Some(nalgebra::Cholesky::new(m.clone())?.inverse())
}

/// Reconstructs a symmetric matrix with eigenvalues clamped to `>= floor`.
pub fn clip_eigenvalues<T: Real>(m: &DMatrix<T>, floor: T) -> DMatrix<T> {
    let eig = sym_eigen(m);
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for j in 0..n {
        let v = eig.values[j].max(floor);
        for i in 0..n {
            scaled[(i, j)] *= v;
        }
    }
    symmetrize(&(scaled * eig.vectors.transpose()))
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthogonal<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<T> {
    let g = DMatrix::from_fn(n, n, |_, _| {
        T::of(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
    });
    g.qr().q()
}

/// Random symmetric positive definite matrix with eigenvalues in
/// `[eig_min, eig_max]`.
pub fn random_spd<T: Real, R: Rng + ?Sized>(
    n: usize,
    eig_min: f64,
    eig_max: f64,
    rng: &mut R,
) -> DMatrix<T> {
    let q = random_orthogonal::<T, R>(n, rng);
    let mut scaled = q.clone();
    for j in 0..n {
        let v = T::of(rng.random_range(eig_min..=eig_max));
        for i in 0..n {
            scaled[(i, j)] *= v;
        }
    }
    symmetrize(&(scaled * q.transpose()))
}

//! Dense symmetric-matrix helpers.
//!
//! Eigen-decompositions go through nalgebra's symmetric QR iteration; the
//! functions here add the symmetry checks and the small derived quantities
//! (square roots, margins) used throughout the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative asymmetry tolerance accepted for "symmetric" inputs.
pub const SYMMETRY_TOL: f64 = 1e-12;

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() / scale
}

pub fn ensure_square(m: &DMatrix<f64>, context: &'static str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context,
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    Ok(m.nrows())
}

pub fn ensure_symmetric(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    ensure_square(m, context)?;
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric {
            context,
            asymmetry: asym,
        });
    }
    Ok(())
}

/// Symmetrize by averaging with the transpose.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    ensure_symmetric(m, "symmetric eigenvalues")?;
    let mut ev = symmetrize(m).symmetric_eigenvalues();
    ev.as_mut_slice().sort_by(f64::total_cmp);
    Ok(ev)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_eigenvalues(m)?.max())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_eigenvalues(m)?.min())
}

/// Smallest eigenvalue of the symmetric part; used for certificate margins on
/// matrices assembled from floating-point products.
pub fn min_eigenvalue_sym_part(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().min()
}

pub fn max_eigenvalue_sym_part(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().max()
}

pub fn ensure_positive_definite(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    ensure_symmetric(m, context)?;
    let min = min_eigenvalue_sym_part(m);
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite {
            context,
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_symmetric(m, "matrix square root")?;
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.min() < -1e-12 * eig.eigenvalues.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite {
            context: "matrix square root",
            min_eigenvalue: eig.eigenvalues.min(),
        });
    }
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&sqrt_vals) * v.transpose())))
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    ensure_positive_definite(m, context)?;
    let chol = symmetrize(m)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite {
            context,
            min_eigenvalue: min_eigenvalue_sym_part(m),
        })?;
    Ok(symmetrize(&chol.inverse()))
}

/// Quadratic form `xᵀ M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

//! Extremal eigenpairs of real symmetric matrices.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EigError {
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("empty matrix")]
    Empty,
}

/// Largest eigenvalue and a unit eigenvector of a symmetric matrix.
///
/// The input is symmetrized as `(M + M^T)/2` before decomposition, so tiny
/// asymmetries from accumulated round-off are harmless.
pub fn max_eigpair(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>), EigError> {
    if m.nrows() != m.ncols() {
        return Err(EigError::NotSquare(m.nrows(), m.ncols()));
    }
    if m.nrows() == 0 {
        return Err(EigError::Empty);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(EigError::NonFinite);
    }
    let sym = (m + m.transpose()) * 0.5;
    let decomp = sym.symmetric_eigen();
    let mut best = 0;
    for i in 1..decomp.eigenvalues.len() {
        if decomp.eigenvalues[i] > decomp.eigenvalues[best] {
            best = i;
        }
    }
    let lambda = decomp.eigenvalues[best];
    let mut w = decomp.eigenvectors.column(best).clone_owned();
    // Fix the sign so identical inputs yield identical vectors.
    let lead = w.iter().cloned().find(|v| v.abs() > 1e-12).unwrap_or(1.0);
    if lead < 0.0 {
        w.neg_mut();
    }
    let norm = w.norm();
    if norm > 0.0 {
        w /= norm;
    }
    Ok((lambda, w))
}

/// All eigenvalues of the symmetrized input, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut vals: Vec<f64> = sym.symmetric_eigenvalues().iter().cloned().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::DMatrix;

/// Eigenvalue floor applied by the positive-definite repair.
pub const PD_EPS: f64 = 1e-9;

/// Frobenius-nearest symmetric positive definite matrix: symmetrize,
/// clip eigenvalues at [`PD_EPS`], reconstruct.
pub fn nearest_positive_definite(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(m.nrows(), m.ncols(), "matrix must be square");
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(PD_EPS)));
    let repaired = &eig.eigenvectors * clipped * eig.eigenvectors.transpose();
    // Reconstruction can pick up asymmetry at roundoff level.
    (&repaired + repaired.transpose()) * 0.5
}

/// True when all eigenvalues of the symmetric part exceed `tol`.
pub fn is_positive_definite(m: &DMatrix<f64>, tol: f64) -> bool {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().all(|v| *v > tol)
}

/// Cholesky-based matrix square root of a symmetric PD matrix, with one
/// PD repair attempt on failure.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    match m.clone().cholesky() {
        Some(c) => Some(c.l()),
        None => nearest_positive_definite(m).cholesky().map(|c| c.l()),
    }
}

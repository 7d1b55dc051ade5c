//! Small dense linear-algebra helpers shared by the estimators and solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix. The input is symmetrized first
/// so callers may pass matrices that are symmetric only up to rounding.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    (eig.eigenvalues, eig.eigenvectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Ratio of extreme eigenvalues; `inf` when the smallest is not positive.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(m);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Clips eigenvalues below `rel_eps * lambda_max` up to that floor and
/// reassembles the matrix. Output is symmetric PSD whenever `lambda_max > 0`;
/// a non-positive spectrum collapses to the zero matrix.
pub fn spectral_clip(m: &DMatrix<f64>, rel_eps: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floor = if max > 0.0 { rel_eps * max } else { 0.0 };
    let clipped = DVector::from_iterator(vals.len(), vals.iter().map(|&v| v.max(floor)));
    let scaled = &vecs * DMatrix::from_diagonal(&clipped);
    symmetrize(&(scaled * vecs.transpose()))
}

/// Solves `M x = b` for symmetric positive-definite `M` via Cholesky, with an
/// LU fallback for matrices that are only numerically indefinite.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    m.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::LinAlg("singular matrix; consider PSD repair".into()))
}

/// Lower-triangular Cholesky factor; errors when the matrix is not positive
/// definite (callers usually suggest `smooth_and_repair` on failure).
pub fn chol_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::LinAlg("matrix not positive definite; consider PSD repair".into()))
}

/// Solves the equality-constrained stationarity system
///
/// ```text
/// [ M  -1 ] [ x ]   [ rhs ]
/// [ 1'  0 ] [ l ] = [  1  ]
/// ```
///
/// i.e. `M x - l*1 = rhs` with `1'x = 1`, returning `(x, l)`.
pub fn bordered_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let n = m.nrows();
    if m.ncols() != n || rhs.len() != n {
        return Err(Error::Shape(format!(
            "bordered solve needs square M and matching rhs, got {}x{} and {}",
            m.nrows(),
            m.ncols(),
            rhs.len()
        )));
    }
    let mut big = DMatrix::<f64>::zeros(n + 1, n + 1);
    big.view_mut((0, 0), (n, n)).copy_from(m);
    for i in 0..n {
        big[(i, n)] = -1.0;
        big[(n, i)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n + 1);
    b.rows_mut(0, n).copy_from(rhs);
    b[n] = 1.0;
    let sol = big
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::LinAlg("singular bordered system".into()))?;
    let x = DVector::from_iterator(n, sol.iter().take(n).cloned());
    Ok((x, sol[n]))
}

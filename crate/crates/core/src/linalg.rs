//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub(crate) fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

/// `log det` of a symmetric positive-definite matrix via its Cholesky factor.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(m)
        .ok_or_else(|| Error::Parameter("matrix is not positive definite".into()))?;
    Ok(chol_log_det(&chol))
}

pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn inverse_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = cholesky(m)
        .ok_or_else(|| Error::Parameter("matrix is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square() && cholesky(m).is_some()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let p = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..p {
        for j in (i + 1)..p {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `xᵀ A x` for square `A`.
pub(crate) fn quad_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let p = x.len();
    a.as_slice()
        .chunks_exact(p)
        .zip(x)
        .map(|(col, &xj)| col.iter().zip(x).map(|(c, xi)| c * xi).sum::<f64>() * xj)
        .sum()
}

/// `y = A x` for square `A`, column-major friendly.
pub(crate) fn mat_vec(a: &DMatrix<f64>, x: &[f64], y: &mut [f64]) {
    let p = x.len();
    y.iter_mut().for_each(|v| *v = 0.0);
    for (col, &xj) in a.as_slice().chunks_exact(p).zip(x) {
        if xj == 0.0 {
            continue;
        }
        for (yi, aij) in y.iter_mut().zip(col) {
            *yi += aij * xj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_det_matches_eigenvalues() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let eig = SymmetricEigen::new(m.clone()).eigenvalues;
        let expected: f64 = eig.iter().map(|e: &f64| e.ln()).sum();
        assert!((log_det_spd(&m).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn non_pd_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!is_positive_definite(&m));
        assert!(inverse_spd(&m).is_err());
    }

    #[test]
    fn quad_form_and_mat_vec_agree() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 3.0]);
        let x = [0.5, -2.0];
        let mut y = [0.0; 2];
        mat_vec(&m, &x, &mut y);
        let direct: f64 = x.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        assert!((quad_form(&m, &x) - direct).abs() < 1e-14);
        assert!((y[0] - 3.0).abs() < 1e-14 && (y[1] + 6.5).abs() < 1e-14);
    }
}

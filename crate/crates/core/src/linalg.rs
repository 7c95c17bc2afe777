//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Config(format!("{what} is not square")));
    }
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Config(format!("{what} is not symmetric positive definite")))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::NAN)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(f64::NAN)
}

/// Induced 2-norm (largest singular value).
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |acc, &s| acc.max(s))
}

/// Largest relative asymmetry `max |m_ij - m_ji| / max |m_ij|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).amax() / scale
}

/// Solve `X S = B` for SPD `S` (i.e. `X = B S^{-1}`) without forming the inverse.
pub fn right_solve_spd(b: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = s.clone().cholesky()?;
    Some(chol.solve(&b.transpose()).transpose())
}

/// `sum_i v_i^2 / lambda` style weighted norm `|v|_S^2 = v^T S^{-1} v`, given the lower factor of `S`.
pub fn weighted_sq_norm(v: &DVector<f64>, chol_lower: &DMatrix<f64>) -> f64 {
    let z = chol_lower
        .solve_lower_triangular(v)
        .expect("Cholesky factor has a positive diagonal");
    z.norm_squared()
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.trace()
}

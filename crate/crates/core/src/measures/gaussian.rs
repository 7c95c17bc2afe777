use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, cholesky_lower, min_eigenvalue, symmetrize};

/// `N(mean, cov)` with an SPD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension {
                expected: mean.len(),
                actual: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Config("Gaussian parameters must be finite".into()));
        }
        if asymmetry(&cov) > 1e-12 {
            return Err(Error::Config("covariance is not symmetric".into()));
        }
        let cov = symmetrize(&cov);
        let lam = min_eigenvalue(&cov);
        if lam.is_nan() || lam <= 0.0 || cov.clone().cholesky().is_none() {
            return Err(Error::DegenerateMeasure(format!(
                "covariance is not positive definite (smallest eigenvalue {lam:.3e})"
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
        )
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol_lower(&self) -> DMatrix<f64> {
        cholesky_lower(&self.cov, "covariance").expect("validated at construction")
    }

    /// Density at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let l = self.chol_lower();
        let diff = DVector::from_iterator(d, x.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        let z = l.solve_lower_triangular(&diff).expect("positive diagonal");
        let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        (-0.5 * z.norm_squared() - 0.5 * log_det - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
            .exp()
    }

    /// `E|X|^q`, exact for even `q`; odd `q` is supported in one dimension.
    pub fn abs_moment(&self, q: u32) -> Result<f64> {
        if q == 0 {
            return Err(Error::Usage("moment order must be positive".into()));
        }
        if q.is_multiple_of(2) {
            return Ok(self.even_norm_moment(q / 2));
        }
        if self.dim() != 1 {
            return Err(Error::Unsupported(
                "odd polynomial moments of multivariate Gaussians".into(),
            ));
        }
        Ok(odd_abs_moment_1d(self.mean[0], self.cov[(0, 0)].sqrt(), q))
    }

    /// `E|X|^{2n}` via the cumulants of the non-central quadratic form `|X|^2`.
    fn even_norm_moment(&self, n: u32) -> f64 {
        let eig = self.cov.clone().symmetric_eigen();
        let shifted = eig.eigenvectors.transpose() * &self.mean;
        let lambdas: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let n = n as usize;
        // kappa_r = 2^{r-1} (r-1)! sum_i lambda_i^r (1 + r b_i^2), with lambda_i b_i^2 = shifted_i^2
        let mut kappa = vec![0.0; n + 1];
        let mut fact = 1.0;
        for r in 1..=n {
            if r > 1 {
                fact *= (r - 1) as f64;
            }
            let s: f64 = lambdas
                .iter()
                .zip(shifted.iter())
                .map(|(&l, &c)| l.powi(r as i32) + r as f64 * l.powi(r as i32 - 1) * c * c)
                .sum();
            kappa[r] = 2f64.powi(r as i32 - 1) * fact * s;
        }
        let mut raw = vec![0.0; n + 1];
        raw[0] = 1.0;
        for m in 1..=n {
            let mut acc = 0.0;
            let mut binom = 1.0;
            for k in 0..m {
                acc += binom * kappa[k + 1] * raw[m - 1 - k];
                binom = binom * (m - 1 - k) as f64 / (k + 1) as f64;
            }
            raw[m] = acc;
        }
        raw[n]
    }
}

/// `E|m + sZ|^q` for odd `q` using truncated normal moments.
fn odd_abs_moment_1d(m: f64, s: f64, q: u32) -> f64 {
    let a = -m / s;
    let phi = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let q = q as usize;
    // upper[r] = E[Z^r; Z > a]
    let mut upper = vec![0.0; q + 1];
    upper[0] = 0.5 * erfc(a / std::f64::consts::SQRT_2);
    if q >= 1 {
        upper[1] = phi;
    }
    for r in 2..=q {
        upper[r] = a.powi(r as i32 - 1) * phi + (r - 1) as f64 * upper[r - 2];
    }
    let full = |r: usize| -> f64 {
        if r % 2 == 1 {
            0.0
        } else {
            (1..r).step_by(2).map(|k| k as f64).product()
        }
    };
    let mut binom = 1.0;
    let mut total = 0.0;
    for r in 0..=q {
        total += binom * m.powi((q - r) as i32) * s.powi(r as i32) * (2.0 * upper[r] - full(r));
        binom = binom * (q - r) as f64 / (r + 1) as f64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_moments() {
        let g = GaussianMeasure::standard(2);
        assert!((g.abs_moment(2).unwrap() - 2.0).abs() < 1e-14);
        let g1 = GaussianMeasure::standard(1);
        assert!((g1.abs_moment(4).unwrap() - 3.0).abs() < 1e-14);
        // E|Z| = sqrt(2/pi), E|Z|^3 = 2 sqrt(2/pi)
        let c = (2.0 / std::f64::consts::PI).sqrt();
        assert!((g1.abs_moment(1).unwrap() - c).abs() < 1e-14);
        assert!((g1.abs_moment(3).unwrap() - 2.0 * c).abs() < 1e-13);
    }

    #[test]
    fn shifted_fourth_moment() {
        // E X^4 for N(m, s^2) = m^4 + 6 m^2 s^2 + 3 s^4
        let g = GaussianMeasure::scalar(1.5, 0.7).unwrap();
        let expected = 1.5f64.powi(4) + 6.0 * 2.25 * 0.7 + 3.0 * 0.49;
        assert!((g.abs_moment(4).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn multivariate_fourth_moment() {
        // E|X|^4 = (|m|^2 + tr C)^2 + 2 tr(C^2) + 4 m^T C m
        let m = DVector::from_vec(vec![0.3, -1.0]);
        let c = DMatrix::from_row_slice(2, 2, &[1.2, 0.4, 0.4, 0.5]);
        let g = GaussianMeasure::new(m.clone(), c.clone()).unwrap();
        let a = m.norm_squared() + c.trace();
        let expected = a * a + 2.0 * (&c * &c).trace() + 4.0 * (m.transpose() * &c * &m)[(0, 0)];
        assert!((g.abs_moment(4).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn odd_moment_far_from_origin() {
        // |X| = X almost surely when the mean is many deviations above zero
        let g = GaussianMeasure::scalar(10.0, 0.25).unwrap();
        assert!((g.abs_moment(1).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_singular_covariance() {
        let r = GaussianMeasure::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        assert!(matches!(r, Err(Error::DegenerateMeasure(_))));
    }

    #[test]
    fn density_normalization_1d() {
        let g = GaussianMeasure::scalar(0.0, 1.0).unwrap();
        assert!((g.density(&[0.0]) - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    }
}

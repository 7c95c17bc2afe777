//! Gaussian kernels evaluated many times against fixed centres, without per-call allocation.

use nalgebra::DMatrix;

/// Squared Mahalanobis distance beyond which a kernel term is below `e^-40` of its peak.
pub(crate) const NEGLIGIBLE_SQ_DIST: f64 = 80.0;

/// `x -> N(x; c, S)` for a fixed SPD `S`, given its lower Cholesky factor.
#[derive(Debug, Clone)]
pub(crate) struct GaussKernel {
    dim: usize,
    /// Row-major inverse of the Cholesky factor (lower triangular).
    linv: Vec<f64>,
    log_norm: f64,
}

impl GaussKernel {
    pub fn new(chol_lower: &DMatrix<f64>) -> Self {
        let dim = chol_lower.nrows();
        let inv = chol_lower
            .clone()
            .try_inverse()
            .expect("Cholesky factor with positive diagonal is invertible");
        let mut linv = vec![0.0; dim * dim];
        for i in 0..dim {
            for k in 0..=i {
                linv[i * dim + k] = inv[(i, k)];
            }
        }
        let log_det: f64 = (0..dim).map(|i| chol_lower[(i, i)].ln()).sum();
        let log_norm = 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det;
        Self { dim, linv, log_norm }
    }

    /// `|x - c|^2_S`
    #[inline]
    pub fn sq_dist(&self, x: &[f64], c: &[f64]) -> f64 {
        let d = self.dim;
        if d == 1 {
            let z = (x[0] - c[0]) * self.linv[0];
            return z * z;
        }
        if d == 2 {
            let (a, b) = (x[0] - c[0], x[1] - c[1]);
            let z0 = self.linv[0] * a;
            let z1 = self.linv[2] * a + self.linv[3] * b;
            return z0 * z0 + z1 * z1;
        }
        let mut acc = 0.0;
        for i in 0..d {
            let mut z = 0.0;
            for k in 0..=i {
                z += self.linv[i * d + k] * (x[k] - c[k]);
            }
            acc += z * z;
        }
        acc
    }

    /// `exp(-|x - c|^2_S / 2)`, set to zero beyond `NEGLIGIBLE_SQ_DIST`.
    #[inline]
    pub fn truncated_likelihood(&self, x: &[f64], c: &[f64]) -> f64 {
        let q = self.sq_dist(x, c);
        if q > NEGLIGIBLE_SQ_DIST {
            0.0
        } else {
            (-0.5 * q).exp()
        }
    }

    /// Normalizing constant of the density.
    pub fn normalizer(&self) -> f64 {
        (-self.log_norm).exp()
    }

    /// Normalized density.
    #[inline]
    pub fn density(&self, x: &[f64], c: &[f64]) -> f64 {
        (-0.5 * self.sq_dist(x, c) - self.log_norm).exp()
    }

    /// Unnormalized likelihood `exp(-|x - c|^2_S / 2)`.
    #[inline]
    pub fn likelihood(&self, x: &[f64], c: &[f64]) -> f64 {
        (-0.5 * self.sq_dist(x, c)).exp()
    }
}

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Equally weighted point masses `(1/N) sum_i delta_{x_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    particles: Vec<DVector<f64>>,
}

impl EmpiricalMeasure {
    pub fn new(particles: Vec<DVector<f64>>) -> Result<Self> {
        let first = particles
            .first()
            .ok_or_else(|| Error::Config("empirical measure needs at least one particle".into()))?;
        let d = first.len();
        for p in &particles {
            if p.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: p.len(),
                });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("particle coordinates must be finite".into()));
            }
        }
        Ok(Self { particles })
    }

    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(xs.iter().map(|&x| DVector::from_element(1, x)).collect())
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    /// Mean and covariance with the `1/N` normalization.
    pub fn mean_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        mean_cov_of(&self.particles)
    }

    pub fn average<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> f64 {
        self.particles.iter().map(f).sum::<f64>() / self.len() as f64
    }
}

/// Mean and `1/N` covariance of a set of vectors, summed in index order.
pub fn mean_cov_of(xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mut mean = DVector::zeros(d);
    for x in xs {
        mean += x;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        let c = x - &mean;
        cov.ger(1.0 / n, &c, &c, 1.0);
    }
    (mean, cov)
}

/// Cross-covariance `(1/N) sum (a_i - mean a)(b_i - mean b)^T` and the covariance of `b`.
pub fn cross_cov_of(a: &[DVector<f64>], b: &[DVector<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.len() as f64;
    let (ma, _) = mean_of(a);
    let (mb, _) = mean_of(b);
    let mut cab = DMatrix::zeros(ma.len(), mb.len());
    let mut cbb = DMatrix::zeros(mb.len(), mb.len());
    for (x, y) in a.iter().zip(b) {
        let dx = x - &ma;
        let dy = y - &mb;
        cab.ger(1.0 / n, &dx, &dy, 1.0);
        cbb.ger(1.0 / n, &dy, &dy, 1.0);
    }
    (cab, cbb)
}

fn mean_of(xs: &[DVector<f64>]) -> (DVector<f64>, usize) {
    let mut m = DVector::zeros(xs[0].len());
    for x in xs {
        m += x;
    }
    (m / xs.len() as f64, xs.len())
}

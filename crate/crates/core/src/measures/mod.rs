//! Probability measures in three representations (Gaussian, grid density, particle cloud)
//! and the quantities the filters are compared with: moments, covariance blocks,
//! Gaussian projection, the weighted total-variation distance and observable errors.

mod empirical;
mod gaussian;
mod grid;
mod observable;

use nalgebra::{DMatrix, DVector};

pub use empirical::{cross_cov_of, mean_cov_of, EmpiricalMeasure};
pub use gaussian::GaussianMeasure;
pub use grid::{weighted_tv, GridAxis, GridMeasure, BOUNDARY_BAND, BOUNDARY_MASS_LIMIT};
pub use observable::{Observable, ObservableKind};

use crate::error::{Error, Result};
use crate::linalg::sym_eigenvalues;

/// Common surface of every measure representation.
pub trait Measure {
    fn dim(&self) -> usize;
    fn mean_cov(&self) -> Result<(DVector<f64>, DMatrix<f64>)>;
    /// `int |x|^q dmu`
    fn abs_moment(&self, q: u32) -> Result<f64>;
    /// `mu[phi]`
    fn expect(&self, phi: &Observable) -> Result<f64>;
}

fn check_observable(phi: &Observable, dim: usize) -> Result<()> {
    match phi.max_index() {
        Some(i) if i >= dim => Err(Error::Dimension {
            expected: dim,
            actual: i + 1,
        }),
        _ => Ok(()),
    }
}

impl Measure for GaussianMeasure {
    fn dim(&self) -> usize {
        GaussianMeasure::dim(self)
    }

    fn mean_cov(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.mean().clone(), self.cov().clone()))
    }

    fn abs_moment(&self, q: u32) -> Result<f64> {
        GaussianMeasure::abs_moment(self, q)
    }

    fn expect(&self, phi: &Observable) -> Result<f64> {
        check_observable(phi, self.dim())?;
        Ok(phi.gaussian_expectation(self))
    }
}

impl Measure for GridMeasure {
    fn dim(&self) -> usize {
        GridMeasure::dim(self)
    }

    fn mean_cov(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok(GridMeasure::mean_cov(self))
    }

    fn abs_moment(&self, q: u32) -> Result<f64> {
        GridMeasure::abs_moment(self, q)
    }

    fn expect(&self, phi: &Observable) -> Result<f64> {
        check_observable(phi, self.dim())?;
        Ok(self.expect_fn(|x| phi.eval(x)))
    }
}

impl Measure for EmpiricalMeasure {
    fn dim(&self) -> usize {
        EmpiricalMeasure::dim(self)
    }

    fn mean_cov(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok(EmpiricalMeasure::mean_cov(self))
    }

    fn abs_moment(&self, q: u32) -> Result<f64> {
        if q == 0 {
            return Err(Error::Usage("moment order must be positive".into()));
        }
        Ok(self.average(|x| x.norm().powi(q as i32)))
    }

    fn expect(&self, phi: &Observable) -> Result<f64> {
        check_observable(phi, self.dim())?;
        Ok(self.average(|x| phi.eval_vec(x)))
    }
}

/// Mean and covariance blocks of a measure on the joint (state, observation) space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMoments {
    pub m_u: DVector<f64>,
    pub m_y: DVector<f64>,
    pub c_uu: DMatrix<f64>,
    pub c_uy: DMatrix<f64>,
    pub c_yy: DMatrix<f64>,
}

impl JointMoments {
    pub fn from_mean_cov(mean: &DVector<f64>, cov: &DMatrix<f64>, dim_u: usize) -> Result<Self> {
        let n = mean.len();
        if dim_u == 0 || dim_u >= n || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Usage(format!(
                "cannot split a {n}-dimensional joint at state dimension {dim_u}"
            )));
        }
        let dim_y = n - dim_u;
        Ok(Self {
            m_u: mean.rows(0, dim_u).into_owned(),
            m_y: mean.rows(dim_u, dim_y).into_owned(),
            c_uu: cov.view((0, 0), (dim_u, dim_u)).into_owned(),
            c_uy: cov.view((0, dim_u), (dim_u, dim_y)).into_owned(),
            c_yy: cov.view((dim_u, dim_u), (dim_y, dim_y)).into_owned(),
        })
    }

    pub fn dim_u(&self) -> usize {
        self.m_u.len()
    }

    pub fn dim_y(&self) -> usize {
        self.m_y.len()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim_u() + self.dim_y());
        m.rows_mut(0, self.dim_u()).copy_from(&self.m_u);
        m.rows_mut(self.dim_u(), self.dim_y()).copy_from(&self.m_y);
        m
    }

    pub fn full_cov(&self) -> DMatrix<f64> {
        let (du, dy) = (self.dim_u(), self.dim_y());
        let mut c = DMatrix::zeros(du + dy, du + dy);
        c.view_mut((0, 0), (du, du)).copy_from(&self.c_uu);
        c.view_mut((0, du), (du, dy)).copy_from(&self.c_uy);
        c.view_mut((du, 0), (dy, du)).copy_from(&self.c_uy.transpose());
        c.view_mut((du, du), (dy, dy)).copy_from(&self.c_yy);
        c
    }
}

pub fn moment_q<M: Measure + ?Sized>(mu: &M, q: u32) -> Result<f64> {
    mu.abs_moment(q)
}

pub fn mean_cov<M: Measure + ?Sized>(mu: &M) -> Result<(DVector<f64>, DMatrix<f64>)> {
    mu.mean_cov()
}

pub fn joint_blocks<M: Measure + ?Sized>(pi: &M, dim_u: usize) -> Result<JointMoments> {
    let (m, c) = pi.mean_cov()?;
    JointMoments::from_mean_cov(&m, &c, dim_u)
}

/// `N(M(mu), C(mu))`.
pub fn gaussian_projection<M: Measure + ?Sized>(mu: &M) -> Result<GaussianMeasure> {
    let (m, c) = mu.mean_cov()?;
    GaussianMeasure::new(m, crate::linalg::symmetrize(&c))
}

/// `|mu1[phi] - mu2[phi]|`
pub fn observable_error<A, B>(mu1: &A, mu2: &B, phi: &Observable) -> Result<f64>
where
    A: Measure + ?Sized,
    B: Measure + ?Sized,
{
    Ok((mu1.expect(phi)? - mu2.expect(phi)?).abs())
}

/// Membership in the set of measures with `|M| <= R` and `R^-2 I <= C <= R^2 I`.
pub fn in_p_r<M: Measure + ?Sized>(mu: &M, r: f64) -> Result<bool> {
    if !(r >= 1.0) {
        return Err(Error::Usage(format!("radius must be at least 1, got {r}")));
    }
    let (m, c) = mu.mean_cov()?;
    let ev = sym_eigenvalues(&c);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    Ok(m.norm() <= r && lo >= 1.0 / (r * r) && hi <= r * r)
}

/// Smallest `R >= 1` with `mu` in the radius-`R` class; infinite for singular covariance.
pub fn minimal_radius<M: Measure + ?Sized>(mu: &M) -> Result<f64> {
    let (m, c) = mu.mean_cov()?;
    Ok(radius_from_moments(&m, &c))
}

pub fn radius_from_moments(m: &DVector<f64>, c: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(c);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    let inv = if lo > 0.0 { 1.0 / lo.sqrt() } else { f64::INFINITY };
    1f64.max(m.norm()).max(hi.max(0.0).sqrt()).max(inv)
}

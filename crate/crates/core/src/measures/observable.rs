use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use super::gaussian::GaussianMeasure;
use crate::error::{Error, Result};

/// Catalog of test functions with polynomial growth of degree at most two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObservableKind {
    Constant(f64),
    /// `u_i`
    Coordinate(usize),
    /// `u_i u_k`
    Product(usize, usize),
    /// `|u|^2`
    SquaredNorm,
}

/// A test function together with constants certifying
/// `|phi(u) - phi(v)| <= L |u - v| (1 + |u|^s + |v|^s)` and `|phi(u)| <= R (1 + |u|^{s+1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observable {
    pub kind: ObservableKind,
    pub lipschitz: f64,
    pub growth: f64,
    pub exponent: f64,
}

impl Observable {
    pub fn new(kind: ObservableKind) -> Self {
        let (lipschitz, growth, exponent) = match kind {
            ObservableKind::Constant(c) => (0.0, c.abs(), 0.0),
            // |u_i - v_i| <= |u - v| <= (1/3) |u - v| (1 + 1 + 1); |u_i| <= 1 + |u|
            ObservableKind::Coordinate(_) => (1.0 / 3.0, 1.0, 0.0),
            // |u_i u_k - v_i v_k| <= (|u| + |v|) |u - v|
            ObservableKind::Product(..) => (1.0, 1.0, 1.0),
            ObservableKind::SquaredNorm => (1.0, 1.0, 1.0),
        };
        Self {
            kind,
            lipschitz,
            growth,
            exponent,
        }
    }

    pub fn coordinate(i: usize) -> Self {
        Self::new(ObservableKind::Coordinate(i))
    }

    pub fn squared_norm() -> Self {
        Self::new(ObservableKind::SquaredNorm)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(ObservableKind::Constant(c))
    }

    pub fn product(i: usize, k: usize) -> Self {
        Self::new(ObservableKind::Product(i, k))
    }

    /// Constant one, every coordinate, and every degree-two monomial, for a `dim`-dimensional state.
    pub fn catalog(dim: usize) -> Vec<Self> {
        let mut out = vec![Self::constant(1.0)];
        out.extend((0..dim).map(Self::coordinate));
        out.push(Self::squared_norm());
        for i in 0..dim {
            for k in i..dim {
                out.push(Self::product(i, k));
            }
        }
        out
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        match self.kind {
            ObservableKind::Constant(c) => c,
            ObservableKind::Coordinate(i) => u[i],
            ObservableKind::Product(i, k) => u[i] * u[k],
            ObservableKind::SquaredNorm => u.iter().map(|x| x * x).sum(),
        }
    }

    pub fn eval_vec(&self, u: &DVector<f64>) -> f64 {
        self.eval(u.as_slice())
    }

    /// Largest state index the observable reads, if any.
    pub fn max_index(&self) -> Option<usize> {
        match self.kind {
            ObservableKind::Coordinate(i) => Some(i),
            ObservableKind::Product(i, k) => Some(i.max(k)),
            _ => None,
        }
    }

    pub fn gaussian_expectation(&self, g: &GaussianMeasure) -> f64 {
        let m = g.mean();
        let c = g.cov();
        match self.kind {
            ObservableKind::Constant(v) => v,
            ObservableKind::Coordinate(i) => m[i],
            ObservableKind::Product(i, k) => c[(i, k)] + m[i] * m[k],
            ObservableKind::SquaredNorm => m.norm_squared() + c.trace(),
        }
    }

    /// Check both certified inequalities at a pair of states.
    pub fn satisfies_bounds(&self, u: &[f64], v: &[f64]) -> bool {
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let (nu, nv) = (norm(u), norm(v));
        let duv = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let slack = 1e-12 * (1.0 + nu * nu + nv * nv);
        let lip = (self.eval(u) - self.eval(v)).abs()
            <= self.lipschitz * duv * (1.0 + nu.powf(self.exponent) + nv.powf(self.exponent)) + slack;
        let growth = self.eval(u).abs() <= self.growth * (1.0 + nu.powf(self.exponent + 1.0)) + slack;
        lip && growth
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ObservableKind::Constant(c) => write!(f, "const:{c}"),
            ObservableKind::Coordinate(i) => write!(f, "u{i}"),
            ObservableKind::Product(i, k) => write!(f, "u{i}*u{k}"),
            ObservableKind::SquaredNorm => write!(f, "sqnorm"),
        }
    }
}

impl FromStr for Observable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("unknown observable `{s}`"));
        let s = s.trim();
        if s == "sqnorm" {
            return Ok(Self::squared_norm());
        }
        if let Some(c) = s.strip_prefix("const:") {
            return c.parse::<f64>().map(Self::constant).map_err(|_| bad());
        }
        let coord = |t: &str| -> Result<usize> {
            t.strip_prefix('u')
                .and_then(|n| n.parse::<usize>().ok())
                .ok_or_else(bad)
        };
        if let Some((a, b)) = s.split_once('*') {
            return Ok(Self::product(coord(a)?, coord(b)?));
        }
        coord(s).map(Self::coordinate)
    }
}

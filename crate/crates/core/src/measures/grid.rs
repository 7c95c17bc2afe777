use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussian::GaussianMeasure;
use crate::error::{Error, Result};

/// Fraction of the span on each side of an axis that counts as "boundary".
pub const BOUNDARY_BAND: f64 = 0.05;

/// Default tolerated fraction of mass inside the boundary band.
pub const BOUNDARY_MASS_LIMIT: f64 = 1e-8;
/// Largest `|x|^q` integrand on the outermost cells, relative to its maximum.
pub const MOMENT_EDGE_RATIO: f64 = 1e-12;

/// A uniform axis of `n` cells covering `[lo, hi]`; nodes sit at cell centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo || n < 2 {
            return Err(Error::Config(format!(
                "invalid grid axis [{lo}, {hi}] with {n} cells"
            )));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.spacing()
    }

    pub fn first_node(&self) -> f64 {
        self.node(0)
    }

    pub fn last_node(&self) -> f64 {
        self.node(self.n - 1)
    }

    /// Index of the node at or below `x` and the fractional offset to the next node,
    /// or `None` when `x` is outside `[first_node, last_node]`.
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let t = (x - self.first_node()) / self.spacing();
        if !(t >= 0.0 && t <= (self.n - 1) as f64) {
            return None;
        }
        let k = (t.floor() as usize).min(self.n - 2);
        Some((k, t - k as f64))
    }

    fn band(&self) -> usize {
        ((BOUNDARY_BAND * self.n as f64).ceil() as usize).max(1)
    }
}

/// A probability density sampled at the nodes of a tensor grid (row-major, last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    axes: Vec<GridAxis>,
    density: Vec<f64>,
}

impl GridMeasure {
    pub fn new(axes: Vec<GridAxis>, density: Vec<f64>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("grid needs at least one axis".into()));
        }
        let len: usize = axes.iter().map(|a| a.n).product();
        if density.len() != len {
            return Err(Error::Dimension {
                expected: len,
                actual: density.len(),
            });
        }
        if density.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::Config("grid density must be finite and nonnegative".into()));
        }
        Ok(Self { axes, density })
    }

    pub fn zeros(axes: Vec<GridAxis>) -> Self {
        let len = axes.iter().map(|a| a.n).product();
        Self {
            axes,
            density: vec![0.0; len],
        }
    }

    /// Sample `f` at every node. `f` must be nonnegative.
    pub fn from_fn<F>(axes: Vec<GridAxis>, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let probe = Self::zeros(axes);
        let density: Vec<f64> = (0..probe.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; probe.dim()],
                |buf, idx| {
                    probe.coords_into(idx, buf);
                    f(buf)
                },
            )
            .collect();
        Self::new(probe.axes, density)
    }

    /// Render a Gaussian on the grid and normalize by quadrature.
    pub fn from_gaussian(g: &GaussianMeasure, axes: Vec<GridAxis>) -> Result<Self> {
        if axes.len() != g.dim() {
            return Err(Error::Dimension {
                expected: g.dim(),
                actual: axes.len(),
            });
        }
        let l = g.chol_lower();
        let d = g.dim();
        let log_norm = l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
            + 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        let mean = g.mean().clone();
        let mut out = Self::from_fn(axes, |x| {
            let diff = DVector::from_iterator(d, x.iter().zip(mean.iter()).map(|(a, m)| a - m));
            let z = l.solve_lower_triangular(&diff).expect("positive diagonal");
            (-0.5 * z.norm_squared() - log_norm).exp()
        })?;
        out.normalize()?;
        Ok(out)
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.spacing()).product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for k in (0..self.dim().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.axes[k + 1].n;
        }
        s
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.axes[k].n;
            flat /= self.axes[k].n;
        }
        idx
    }

    pub fn coords_into(&self, mut flat: usize, buf: &mut [f64]) {
        for k in (0..self.dim()).rev() {
            let n = self.axes[k].n;
            buf[k] = self.axes[k].node(flat % n);
            flat /= n;
        }
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut buf = vec![0.0; self.dim()];
        self.coords_into(flat, &mut buf);
        buf
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_volume()
    }

    /// Rescale to unit mass; returns the mass before rescaling.
    pub fn normalize(&mut self) -> Result<f64> {
        let m = self.mass();
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::DegenerateMeasure(format!("grid mass {m:.3e}")));
        }
        let inv = 1.0 / m;
        self.density.iter_mut().for_each(|d| *d *= inv);
        Ok(m)
    }

    /// Fraction of the mass sitting in the outer band of any axis.
    pub fn boundary_mass(&self) -> f64 {
        self.boundary_mass_along(&(0..self.dim()).collect::<Vec<_>>())
    }

    /// Like [`boundary_mass`](Self::boundary_mass) but only looks at the listed axes.
    pub fn boundary_mass_along(&self, which: &[usize]) -> f64 {
        let total: f64 = self.density.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let edge: f64 = self
            .density
            .iter()
            .enumerate()
            .filter(|(flat, _)| {
                let idx = self.multi_index(*flat);
                which.iter().any(|&k| {
                    let a = &self.axes[k];
                    idx[k] < a.band() || idx[k] >= a.n - a.band()
                })
            })
            .map(|(_, d)| d)
            .sum();
        edge / total
    }

    /// Fail when the boundary band holds more than `limit` of the mass.
    pub fn check_boundary(&self, limit: f64, context: &str) -> Result<f64> {
        let b = self.boundary_mass();
        if b > limit {
            return Err(Error::Truncation {
                mass: b,
                limit,
                context: context.to_string(),
            });
        }
        Ok(b)
    }

    /// Quadrature of `f` against the density.
    pub fn expect_fn<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        let mut buf = vec![0.0; self.dim()];
        let mut acc = 0.0;
        for (flat, &d) in self.density.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            self.coords_into(flat, &mut buf);
            acc += f(&buf) * d;
        }
        acc * self.cell_volume()
    }

    pub fn mean_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let w = self.cell_volume();
        let mut buf = vec![0.0; d];
        let mut mean = DVector::zeros(d);
        for (flat, &p) in self.density.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            self.coords_into(flat, &mut buf);
            for k in 0..d {
                mean[k] += buf[k] * p * w;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for (flat, &p) in self.density.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            self.coords_into(flat, &mut buf);
            for a in 0..d {
                let da = buf[a] - mean[a];
                for b in a..d {
                    cov[(a, b)] += da * (buf[b] - mean[b]) * p * w;
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        (mean, cov)
    }

    /// `int |x|^q dmu` by quadrature, refusing grids whose integrand has not decayed at the edge.
    pub fn abs_moment(&self, q: u32) -> Result<f64> {
        if q == 0 {
            return Err(Error::Usage("moment order must be positive".into()));
        }
        let mut buf = vec![0.0; self.dim()];
        let mut max_all = 0.0_f64;
        let mut max_edge = 0.0_f64;
        let mut acc = 0.0;
        for (flat, &p) in self.density.iter().enumerate() {
            self.coords_into(flat, &mut buf);
            let r = buf.iter().map(|x| x * x).sum::<f64>().sqrt();
            let v = r.powi(q as i32) * p;
            acc += v;
            max_all = max_all.max(v);
            let idx = self.multi_index(flat);
            if idx.iter().zip(&self.axes).any(|(&i, a)| i == 0 || i == a.n - 1) {
                max_edge = max_edge.max(v);
            }
        }
        if max_edge > MOMENT_EDGE_RATIO * max_all {
            return Err(Error::Truncation {
                mass: max_edge / max_all,
                limit: MOMENT_EDGE_RATIO,
                context: format!("|x|^{q} integrand has not decayed at the grid boundary"),
            });
        }
        Ok(acc * self.cell_volume())
    }

    /// Marginal density over the axes listed in `keep` (in that order).
    pub fn marginal(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&k| k >= self.dim()) {
            return Err(Error::Usage("invalid marginal axes".into()));
        }
        let axes: Vec<GridAxis> = keep.iter().map(|&k| self.axes[k]).collect();
        let mut out = Self::zeros(axes);
        let out_strides = out.strides();
        let dropped: f64 = (0..self.dim())
            .filter(|k| !keep.contains(k))
            .map(|k| self.axes[k].spacing())
            .product();
        for (flat, &p) in self.density.iter().enumerate() {
            let idx = self.multi_index(flat);
            let o: usize = keep.iter().zip(&out_strides).map(|(&k, s)| idx[k] * s).sum();
            out.density[o] += p * dropped;
        }
        Ok(out)
    }

    pub fn same_axes(&self, other: &Self) -> bool {
        self.axes == other.axes
    }


    /// Binary layout: magic `ENKFGRID`, `u32` version, `u32` ndim, per axis `f64 lo, f64 hi, u64 n`,
    /// then the densities as `f64`. Everything little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 24 * self.dim() + 8 * self.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for a in &self.axes {
            out.extend_from_slice(&a.lo.to_le_bytes());
            out.extend_from_slice(&a.hi.to_le_bytes());
            out.extend_from_slice(&(a.n as u64).to_le_bytes());
        }
        for d in &self.density {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Serialization(format!("grid binary: {m}"));
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(bad("truncated input"));
            }
            let (h, t) = cur.split_at(n);
            cur = t;
            Ok(h)
        };
        if take(8)? != GRID_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != GRID_VERSION {
            return Err(bad("unsupported version"));
        }
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut axes = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let lo = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let hi = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            axes.push(GridAxis::new(lo, hi, n)?);
        }
        let len: usize = axes.iter().map(|a| a.n).product();
        let mut density = Vec::with_capacity(len);
        for _ in 0..len {
            density.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Self::new(axes, density)
    }

    /// One row per node: coordinates then density.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.dim())
            .map(|k| format!("x{k}"))
            .chain(std::iter::once("density".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        let mut buf = vec![0.0; self.dim()];
        for (flat, d) in self.density.iter().enumerate() {
            self.coords_into(flat, &mut buf);
            for x in &buf {
                write!(w, "{x},")?;
            }
            writeln!(w, "{d}")?;
        }
        Ok(())
    }
}

const GRID_MAGIC: &[u8; 8] = b"ENKFGRID";
const GRID_VERSION: u32 = 1;

/// `d_g(mu1, mu2) = int (1 + |v|^2) |rho1 - rho2| dv` by midpoint quadrature on a shared grid.
pub fn weighted_tv(a: &GridMeasure, b: &GridMeasure) -> Result<f64> {
    if !a.same_axes(b) {
        return Err(Error::Usage("weighted_tv needs identical grid axes".into()));
    }
    let mut buf = vec![0.0; a.dim()];
    let mut acc = 0.0;
    for (flat, (p, q)) in a.density.iter().zip(&b.density).enumerate() {
        if p == q {
            continue;
        }
        a.coords_into(flat, &mut buf);
        let g = 1.0 + buf.iter().map(|x| x * x).sum::<f64>();
        acc += g * (p - q).abs();
    }
    Ok(acc * a.cell_volume())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis(lo: f64, hi: f64, n: usize) -> GridAxis {
        GridAxis::new(lo, hi, n).unwrap()
    }

    #[test]
    fn standard_normal_rendering_moments() {
        let g = GaussianMeasure::scalar(0.0, 1.0).unwrap();
        let m = GridMeasure::from_gaussian(&g, vec![axis(-10.0, 10.0, 1 << 12)]).unwrap();
        assert!((m.abs_moment(2).unwrap() - 1.0).abs() < 1e-8);
        assert!((m.mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_normal_mean_cov() {
        let g = GaussianMeasure::scalar(1.0, 2.0).unwrap();
        let m = GridMeasure::from_gaussian(&g, vec![axis(-14.0, 16.0, 4096)]).unwrap();
        let (mean, cov) = m.mean_cov();
        assert!((mean[0] - 1.0).abs() < 1e-8);
        assert!((cov[(0, 0)] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn truncated_moment_is_refused() {
        let g = GaussianMeasure::scalar(0.0, 1.0).unwrap();
        let m = GridMeasure::from_gaussian(&g, vec![axis(-3.0, 3.0, 256)]).unwrap();
        assert!(matches!(m.abs_moment(2), Err(Error::Truncation { .. })));
        assert!(m.check_boundary(BOUNDARY_MASS_LIMIT, "test").is_err());
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let g = GaussianMeasure::new(
            DVector::from_vec(vec![0.1, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
        )
        .unwrap();
        let m = GridMeasure::from_gaussian(&g, vec![axis(-6.0, 6.0, 33), axis(-5.0, 5.0, 17)]).unwrap();
        let back = GridMeasure::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(m, back);
        assert!(GridMeasure::from_bytes(&m.to_bytes()[..20]).is_err());
    }

    #[test]
    fn marginal_of_product() {
        let g = GaussianMeasure::new(
            DVector::from_vec(vec![0.5, -1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
        )
        .unwrap();
        let m = GridMeasure::from_gaussian(&g, vec![axis(-9.0, 9.0, 200), axis(-12.0, 10.0, 220)]).unwrap();
        let mu = m.marginal(&[1]).unwrap();
        let (mean, cov) = mu.mean_cov();
        assert!((mean[0] + 1.0).abs() < 1e-9);
        assert!((cov[(0, 0)] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let m = GridMeasure::from_fn(vec![axis(0.0, 1.0, 4)], |_| 1.0).unwrap();
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("x0,density"));
    }

    #[test]
    fn locate_interpolation_weights() {
        let a = axis(0.0, 4.0, 4); // nodes 0.5, 1.5, 2.5, 3.5
        assert_eq!(a.locate(0.5), Some((0, 0.0)));
        let (k, t) = a.locate(2.0).unwrap();
        assert_eq!(k, 1);
        assert!((t - 0.5).abs() < 1e-15);
        assert_eq!(a.locate(3.5), Some((2, 1.0)));
        assert!(a.locate(0.4).is_none());
        assert!(a.locate(3.6).is_none());
    }
}

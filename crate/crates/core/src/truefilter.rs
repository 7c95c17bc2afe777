//! The exact filter `mu_{j+1} = B_j Q P mu_j` on tensor grids, and the closed-form Kalman
//! recursion for affine-Gaussian models.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GaussKernel;
use crate::linalg::{max_eigenvalue, right_solve_spd, symmetrize};
use crate::measures::{GaussianMeasure, GridAxis, GridMeasure, BOUNDARY_MASS_LIMIT};
use crate::model::{DataRecord, Model};

/// Half-width of the observation axes in units of `sqrt(max eig Gamma)`.
pub const Y_AXIS_HALF_WIDTH: f64 = 8.0;

/// Nodes whose density is below this fraction of the maximum do not count as support
/// when sizing observation axes.
const SUPPORT_FLOOR: f64 = 1e-20;

/// Grid resolution for a run: state axes are fixed; observation axes (when a joint grid is
/// needed) are sized from the current support with `y_cells` cells per observation coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPolicy {
    pub u_axes: Vec<GridAxis>,
    pub y_cells: usize,
}

impl GridPolicy {
    pub fn new(u_axes: Vec<GridAxis>, y_cells: usize) -> Self {
        Self { u_axes, y_cells }
    }

    /// Same `[lo, hi]` with `n` cells on every state axis and `n` observation cells.
    pub fn uniform(dim_u: usize, lo: f64, hi: f64, n: usize) -> Result<Self> {
        let axis = GridAxis::new(lo, hi, n)?;
        Ok(Self::new(vec![axis; dim_u], n))
    }

    pub fn refined(&self, factor: usize) -> Self {
        Self {
            u_axes: self
                .u_axes
                .iter()
                .map(|a| GridAxis { n: a.n * factor, ..*a })
                .collect(),
            y_cells: self.y_cells * factor,
        }
    }

    fn check(&self, model: &Model) -> Result<()> {
        if self.u_axes.len() != model.dim_u() {
            return Err(Error::Config(format!(
                "grid has {} state axes, model has dimension {}",
                self.u_axes.len(),
                model.dim_u()
            )));
        }
        if self.y_cells < 2 {
            return Err(Error::Config("need at least 2 observation cells".into()));
        }
        Ok(())
    }
}

fn node_table(mu: &GridMeasure, f: impl Fn(&DVector<f64>) -> DVector<f64> + Sync) -> (Vec<usize>, Vec<f64>, usize) {
    let active: Vec<usize> = (0..mu.len()).filter(|&k| mu.density()[k] != 0.0).collect();
    let dim_out = if active.is_empty() {
        0
    } else {
        f(&DVector::from_vec(mu.node(active[0]))).len()
    };
    let table: Vec<f64> = active
        .par_iter()
        .flat_map_iter(|&k| -> Vec<f64> { f(&DVector::from_vec(mu.node(k))).data.into() })
        .collect::<Vec<f64>>();
    (active, table, dim_out)
}

/// `P mu` on `out_axes` by quadrature of the Gaussian transition kernel. Returns the renormalized
/// measure and the mass before renormalization.
pub fn predict_grid(mu: &GridMeasure, model: &Model, out_axes: &[GridAxis]) -> Result<(GridMeasure, f64)> {
    if mu.dim() != model.dim_u() || out_axes.len() != model.dim_u() {
        return Err(Error::Dimension {
            expected: model.dim_u(),
            actual: if mu.dim() != model.dim_u() { mu.dim() } else { out_axes.len() },
        });
    }
    let kernel = GaussKernel::new(model.chol_sigma());
    let (active, centres, d) = node_table(mu, |v| model.psi(v));
    let weights: Vec<f64> = active.iter().map(|&k| mu.density()[k] * mu.cell_volume()).collect();
    let norm = kernel.normalizer();
    let mut out = GridMeasure::from_fn(out_axes.to_vec(), |x| {
        let mut acc = 0.0;
        for (w, c) in weights.iter().zip(centres.chunks_exact(d)) {
            acc += w * kernel.truncated_likelihood(x, c);
        }
        acc * norm
    })?;
    let pre = out.normalize()?;
    out.check_boundary(BOUNDARY_MASS_LIMIT, "prediction")?;
    Ok((out, pre))
}

/// Observation axes covering `h` over the support of `nu`, widened by
/// `Y_AXIS_HALF_WIDTH * sqrt(max eig Gamma)`.
pub fn default_y_axes(nu: &GridMeasure, model: &Model, cells: usize) -> Result<Vec<GridAxis>> {
    let dy = model.dim_y();
    let peak = nu.density().iter().cloned().fold(0.0, f64::max);
    let mut lo = vec![f64::INFINITY; dy];
    let mut hi = vec![f64::NEG_INFINITY; dy];
    for (k, &p) in nu.density().iter().enumerate() {
        if p <= SUPPORT_FLOOR * peak {
            continue;
        }
        let y = model.h(&DVector::from_vec(nu.node(k)));
        for i in 0..dy {
            lo[i] = lo[i].min(y[i]);
            hi[i] = hi[i].max(y[i]);
        }
    }
    if !lo[0].is_finite() {
        return Err(Error::DegenerateMeasure("empty support".into()));
    }
    let pad = Y_AXIS_HALF_WIDTH * max_eigenvalue(model.gamma()).sqrt();
    (0..dy)
        .map(|i| GridAxis::new(lo[i] - pad, hi[i] + pad, cells))
        .collect()
}

/// `Q nu` on the joint grid `u_axes x y_axes` (state coordinates first). Returns the renormalized
/// joint and the mass before renormalization.
pub fn lift_grid(nu: &GridMeasure, model: &Model, y_axes: &[GridAxis]) -> Result<(GridMeasure, f64)> {
    if nu.dim() != model.dim_u() || y_axes.len() != model.dim_y() {
        return Err(Error::Dimension {
            expected: model.dim_y(),
            actual: y_axes.len(),
        });
    }
    let du = model.dim_u();
    let kernel = GaussKernel::new(model.chol_gamma());
    let hs: Vec<f64> = (0..nu.len())
        .into_par_iter()
        .flat_map_iter(|k| -> Vec<f64> { model.h(&DVector::from_vec(nu.node(k))).data.into() })
        .collect();
    let y_len: usize = y_axes.iter().map(|a| a.n).product();
    let y_grid = GridMeasure::zeros(y_axes.to_vec());
    let y_nodes: Vec<f64> = (0..y_len).flat_map(|k| y_grid.node(k)).collect();
    let dy = model.dim_y();
    let mut axes = nu.axes().to_vec();
    axes.extend_from_slice(y_axes);
    let density: Vec<f64> = (0..nu.len())
        .into_par_iter()
        .flat_map_iter(|k| {
            let p = nu.density()[k];
            let h = &hs[k * dy..(k + 1) * dy];
            let ys = &y_nodes;
            let kernel = &kernel;
            (0..y_len).map(move |l| {
                if p == 0.0 {
                    0.0
                } else {
                    p * kernel.density(&ys[l * dy..(l + 1) * dy], h)
                }
            })
        })
        .collect();
    let mut joint = GridMeasure::new(axes, density)?;
    let pre = joint.normalize()?;
    let y_dims: Vec<usize> = (du..du + dy).collect();
    let b = joint.boundary_mass_along(&y_dims);
    if b > BOUNDARY_MASS_LIMIT {
        return Err(Error::Truncation {
            mass: b,
            limit: BOUNDARY_MASS_LIMIT,
            context: "lift: observation axes".into(),
        });
    }
    Ok((joint, pre))
}

/// `B pi`: the state slice of the joint density at `y_obs`, interpolated multilinearly between
/// the neighbouring observation planes and renormalized. Returns the measure and the slice integral.
pub fn condition(pi: &GridMeasure, dim_u: usize, y_obs: &DVector<f64>) -> Result<(GridMeasure, f64)> {
    if dim_u == 0 || dim_u >= pi.dim() {
        return Err(Error::Usage(format!("cannot condition a {}-dimensional joint at {dim_u}", pi.dim())));
    }
    let dy = pi.dim() - dim_u;
    if y_obs.len() != dy {
        return Err(Error::Dimension {
            expected: dy,
            actual: y_obs.len(),
        });
    }
    let y_axes = &pi.axes()[dim_u..];
    let mut located = Vec::with_capacity(dy);
    for (a, &y) in y_axes.iter().zip(y_obs.iter()) {
        let (k, t) = a.locate(y).ok_or(Error::OutOfRange {
            value: y,
            lo: a.first_node(),
            hi: a.last_node(),
        })?;
        located.push((k, t));
    }
    let u_axes = pi.axes()[..dim_u].to_vec();
    let u_len: usize = u_axes.iter().map(|a| a.n).product();
    let y_len: usize = y_axes.iter().map(|a| a.n).product();
    let mut corners = Vec::with_capacity(1 << dy);
    for mask in 0..(1usize << dy) {
        let mut flat = 0;
        let mut w = 1.0;
        for (i, (a, &(k, t))) in y_axes.iter().zip(&located).enumerate() {
            let up = mask >> i & 1 == 1;
            flat = flat * a.n + k + up as usize;
            w *= if up { t } else { 1.0 - t };
        }
        if w != 0.0 {
            corners.push((flat, w));
        }
    }
    let density: Vec<f64> = (0..u_len)
        .map(|ku| corners.iter().map(|&(ky, w)| w * pi.density()[ku * y_len + ky]).sum())
        .collect();
    let mut out = GridMeasure::new(u_axes, density)?;
    let z = out.mass();
    if !(z > 1e-300) {
        return Err(Error::DegenerateLikelihood { normalizer: z });
    }
    out.normalize()?;
    Ok((out, z))
}

/// `L nu`: reweight by `exp(-|y_obs - h(u)|^2_Gamma / 2)` and renormalize. Returns the measure and
/// the normalizer `int exp(..) nu(du)`.
pub fn analysis_fused(nu: &GridMeasure, y_obs: &DVector<f64>, model: &Model) -> Result<(GridMeasure, f64)> {
    if y_obs.len() != model.dim_y() {
        return Err(Error::Dimension {
            expected: model.dim_y(),
            actual: y_obs.len(),
        });
    }
    let kernel = GaussKernel::new(model.chol_gamma());
    let density: Vec<f64> = (0..nu.len())
        .into_par_iter()
        .map(|k| {
            let p = nu.density()[k];
            if p == 0.0 {
                return 0.0;
            }
            let h = model.h(&DVector::from_vec(nu.node(k)));
            p * kernel.likelihood(y_obs.as_slice(), h.as_slice())
        })
        .collect();
    let mut out = GridMeasure::new(nu.axes().to_vec(), density)?;
    let z = out.mass();
    if !(z > 1e-300) {
        return Err(Error::DegenerateLikelihood { normalizer: z });
    }
    out.normalize()?;
    Ok((out, z))
}

/// Per-step record of a grid filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    /// `|mass - 1|` of the prediction before renormalization (0 at step 0).
    pub mass_defect: f64,
    pub boundary_mass: f64,
    /// Likelihood normalizer of the analysis (1 at step 0).
    pub normalizer: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub m2: f64,
    pub m4: f64,
}

impl StepDiagnostics {
    fn of(step: usize, mu: &GridMeasure, mass_defect: f64, normalizer: f64) -> Result<Self> {
        let (mean, cov) = mu.mean_cov();
        Ok(Self {
            step,
            mass_defect,
            boundary_mass: mu.boundary_mass(),
            normalizer,
            mean,
            cov,
            m2: mu.abs_moment(2)?,
            m4: mu.abs_moment(4)?,
        })
    }
}

/// Write diagnostics as CSV: `step,mass_defect,boundary_mass,normalizer,mean_i..,cov_ik..,m2,m4`.
pub fn write_diagnostics_csv<W: Write>(diags: &[StepDiagnostics], mut w: W) -> std::io::Result<()> {
    let d = diags.first().map_or(0, |s| s.mean.len());
    write!(w, "step,mass_defect,boundary_mass,normalizer")?;
    for i in 0..d {
        write!(w, ",mean_{i}")?;
    }
    for i in 0..d {
        for k in i..d {
            write!(w, ",cov_{i}{k}")?;
        }
    }
    writeln!(w, ",m2,m4")?;
    for s in diags {
        write!(
            w,
            "{},{:.16e},{:.16e},{:.16e}",
            s.step, s.mass_defect, s.boundary_mass, s.normalizer
        )?;
        for x in s.mean.iter() {
            write!(w, ",{x:.16e}")?;
        }
        for i in 0..d {
            for k in i..d {
                write!(w, ",{:.16e}", s.cov[(i, k)])?;
            }
        }
        writeln!(w, ",{:.16e},{:.16e}", s.m2, s.m4)?;
    }
    Ok(())
}

/// Filtering distributions `mu_0..mu_J` on the grid with per-step diagnostics.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub measures: Vec<GridMeasure>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// `mu_{j+1} = L_j P mu_j` starting from `mu_0` rendered on the grid.
pub fn filter_run(model: &Model, data: &DataRecord, policy: &GridPolicy) -> Result<FilterRun> {
    policy.check(model)?;
    let mu0 = GridMeasure::from_gaussian(model.mu0(), policy.u_axes.clone())?;
    mu0.check_boundary(BOUNDARY_MASS_LIMIT, "initial measure")?;
    let mut diagnostics = vec![StepDiagnostics::of(0, &mu0, 0.0, 1.0).map_err(|e| e.at_step(0))?];
    let mut measures = vec![mu0];
    for j in 0..data.steps() {
        let step = || -> Result<(GridMeasure, StepDiagnostics)> {
            let (pred, pre) = predict_grid(&measures[j], model, &policy.u_axes)?;
            let (post, z) = analysis_fused(&pred, data.observation(j), model)?;
            post.check_boundary(BOUNDARY_MASS_LIMIT, "analysis")?;
            let diag = StepDiagnostics::of(j + 1, &post, (pre - 1.0).abs(), z)?;
            Ok((post, diag))
        };
        let (post, diag) = step().map_err(|e| e.at_step(j + 1))?;
        measures.push(post);
        diagnostics.push(diag);
    }
    Ok(FilterRun { measures, diagnostics })
}

/// `(M m + b, M C M^T + Sigma)` for an affine dynamics field.
pub fn kalman_predict(model: &Model, mu: &GaussianMeasure) -> Result<GaussianMeasure> {
    let f = model.dynamics();
    if !f.is_affine() {
        return Err(Error::Usage("closed-form prediction needs affine dynamics".into()));
    }
    let m = f.matrix();
    GaussianMeasure::new(
        f.affine_part(mu.mean()),
        symmetrize(&(m * mu.cov() * m.transpose() + model.sigma())),
    )
}

/// Gain `C H^T (H C H^T + Gamma)^{-1}` and the conditioned Gaussian.
pub fn kalman_update(model: &Model, forecast: &GaussianMeasure, y_obs: &DVector<f64>) -> Result<GaussianMeasure> {
    let h = model.observation();
    if !h.is_affine() {
        return Err(Error::Usage("closed-form update needs an affine observation".into()));
    }
    let hm = h.matrix();
    let c = forecast.cov();
    let s = symmetrize(&(hm * c * hm.transpose() + model.gamma()));
    let k = right_solve_spd(&(c * hm.transpose()), &s)
        .ok_or_else(|| Error::Internal("innovation covariance is not SPD".into()))?;
    let innovation = y_obs - h.affine_part(forecast.mean());
    let mean = forecast.mean() + &k * innovation;
    let cov = symmetrize(&(c - &k * hm * c));
    GaussianMeasure::new(mean, cov)
}

/// The Kalman recursion `mu_0..mu_J`; the exact filter when both fields are affine.
pub fn kalman_exact(model: &Model, data: &DataRecord) -> Result<Vec<GaussianMeasure>> {
    if !model.is_affine() {
        return Err(Error::Usage("kalman_exact needs affine dynamics and observation".into()));
    }
    let mut out = vec![model.mu0().clone()];
    for j in 0..data.steps() {
        let forecast = kalman_predict(model, &out[j]).map_err(|e| e.at_step(j + 1))?;
        out.push(kalman_update(model, &forecast, data.observation(j)).map_err(|e| e.at_step(j + 1))?);
    }
    Ok(out)
}

//! The mean-field ensemble Kalman filter `mu_{j+1} = T_j Q P mu_j`: the Kalman transport map,
//! an exact Gaussian path for affine models and a grid pushforward path for everything else.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{max_eigenvalue, min_eigenvalue, op_norm, right_solve_spd, symmetrize};
use crate::measures::{joint_blocks, GaussianMeasure, GridAxis, GridMeasure, JointMoments, BOUNDARY_MASS_LIMIT};
use crate::model::{DataRecord, Model};
use crate::truefilter::{default_y_axes, kalman_predict, lift_grid, predict_grid, GridPolicy};

/// Largest accepted condition number of `C^{yy}`.
pub const MAX_GAIN_CONDITION: f64 = 1e12;

/// Fixed number of work chunks for the splatting reduction, so the summation order does not
/// depend on the thread count.
const SPLAT_CHUNKS: usize = 64;

/// `A = C^{uy} (C^{yy})^{-1}` together with the moments it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanGain {
    pub matrix: DMatrix<f64>,
    pub source: JointMoments,
}

impl KalmanGain {
    pub fn norm(&self) -> f64 {
        op_norm(&self.matrix)
    }

    /// `max|A C^{yy} - C^{uy}| / max(1, max|C^{uy}|)`
    pub fn residual(&self) -> f64 {
        let r = &self.matrix * &self.source.c_yy - &self.source.c_uy;
        r.amax() / self.source.c_uy.amax().max(1.0)
    }
}

/// Condition number `lambda_max / lambda_min` of a symmetric matrix (infinite when not PD).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let lo = min_eigenvalue(m);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        max_eigenvalue(m) / lo
    }
}

pub fn kalman_gain(moments: &JointMoments) -> Result<KalmanGain> {
    let condition = condition_number(&moments.c_yy);
    if !(condition <= MAX_GAIN_CONDITION) {
        return Err(Error::DegenerateGain { condition });
    }
    let matrix = right_solve_spd(&moments.c_uy, &symmetrize(&moments.c_yy))
        .ok_or(Error::DegenerateGain { condition })?;
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateGain { condition });
    }
    Ok(KalmanGain {
        matrix,
        source: moments.clone(),
    })
}

/// `u + A (y_obs - y)`
pub fn transport(u: &DVector<f64>, y: &DVector<f64>, gain: &KalmanGain, y_obs: &DVector<f64>) -> DVector<f64> {
    u + &gain.matrix * (y_obs - y)
}

/// Moments of `Q P mu` for Gaussian `mu` and affine fields.
pub fn predicted_joint_gaussian(mu: &GaussianMeasure, model: &Model) -> Result<JointMoments> {
    let h = model.observation();
    if !h.is_affine() {
        return Err(Error::Usage("closed-form joint moments need an affine observation".into()));
    }
    let forecast = kalman_predict(model, mu)?;
    let hm = h.matrix();
    let c = forecast.cov();
    Ok(JointMoments {
        m_u: forecast.mean().clone(),
        m_y: h.affine_part(forecast.mean()),
        c_uu: c.clone(),
        c_uy: c * hm.transpose(),
        c_yy: symmetrize(&(hm * c * hm.transpose() + model.gamma())),
    })
}

/// Gaussian pushforward of `N(m, C)` on `(u, y)` under `(u, y) -> u + A (y_obs - y)`.
pub fn pushforward_gaussian(joint: &JointMoments, gain: &KalmanGain, y_obs: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let a = &gain.matrix;
    let mean = &joint.m_u + a * (y_obs - &joint.m_y);
    let a_cyu = a * joint.c_uy.transpose();
    let cov = &joint.c_uu - &a_cyu - a_cyu.transpose() + a * &joint.c_yy * a.transpose();
    (mean, symmetrize(&cov))
}

/// One exact mean-field step for affine models; returns the analysis and the gain used.
pub fn mf_step_gaussian_with_gain(
    mu: &GaussianMeasure,
    y_obs: &DVector<f64>,
    model: &Model,
) -> Result<(GaussianMeasure, KalmanGain)> {
    if !model.is_affine() {
        return Err(Error::Usage("the Gaussian mean-field path needs an affine model".into()));
    }
    let joint = predicted_joint_gaussian(mu, model)?;
    let gain = kalman_gain(&joint)?;
    let (mean, cov) = pushforward_gaussian(&joint, &gain, y_obs);
    Ok((GaussianMeasure::new(mean, cov)?, gain))
}

pub fn mf_step_gaussian(mu: &GaussianMeasure, y_obs: &DVector<f64>, model: &Model) -> Result<GaussianMeasure> {
    mf_step_gaussian_with_gain(mu, y_obs, model).map(|(m, _)| m)
}

/// Discrepancy between Gaussian conditioning and the transport pushforward of a joint Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    pub mean_discrepancy: f64,
    pub cov_discrepancy: f64,
}

impl EquivalenceReport {
    pub fn max(&self) -> f64 {
        self.mean_discrepancy.max(self.cov_discrepancy)
    }
}

pub fn gaussian_equivalence_check(
    pi: &GaussianMeasure,
    dim_u: usize,
    y_obs: &DVector<f64>,
) -> Result<EquivalenceReport> {
    let joint = JointMoments::from_mean_cov(pi.mean(), pi.cov(), dim_u)?;
    if y_obs.len() != joint.dim_y() {
        return Err(Error::Dimension {
            expected: joint.dim_y(),
            actual: y_obs.len(),
        });
    }
    let gain = kalman_gain(&joint)?;
    let a = &gain.matrix;
    let cond_mean = &joint.m_u + a * (y_obs - &joint.m_y);
    let cond_cov = &joint.c_uu - a * joint.c_uy.transpose();
    let (push_mean, push_cov) = pushforward_gaussian(&joint, &gain, y_obs);
    Ok(EquivalenceReport {
        mean_discrepancy: (cond_mean - push_mean).amax(),
        cov_discrepancy: (cond_cov - push_cov).amax(),
    })
}

/// One random joint Gaussian on `dim_u + dim_y` coordinates with a random datum.
#[derive(Debug, Clone)]
pub struct EquivalenceTrial {
    pub joint: GaussianMeasure,
    pub y_obs: DVector<f64>,
    pub report: EquivalenceReport,
}

/// `gaussian_equivalence_check` on `trials` random joints: covariance `L L^T + 0.1 I` with
/// `L` uniform on `[-1, 1]`, mean and datum uniform on `[-3, 3]`. Trial `k` draws from stream
/// `(seed, k)`.
pub fn equivalence_trials(seed: u64, trials: usize, dim_u: usize, dim_y: usize) -> Result<Vec<EquivalenceTrial>> {
    use crate::rng::{NoiseRole, NoiseStream};
    use rand::Rng;
    if dim_u == 0 || dim_y == 0 {
        return Err(Error::Usage("joint dimensions must be positive".into()));
    }
    let d = dim_u + dim_y;
    (0..trials as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = NoiseStream::new(seed, k).rng(0, 0, NoiseRole::Instance);
            let l = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let cov = symmetrize(&(&l * l.transpose() + DMatrix::identity(d, d) * 0.1));
            let mean = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let y_obs = DVector::from_fn(dim_y, |_, _| rng.random_range(-3.0..3.0));
            let joint = GaussianMeasure::new(mean, cov)?;
            let report = gaussian_equivalence_check(&joint, dim_u, &y_obs)?;
            Ok(EquivalenceTrial { joint, y_obs, report })
        })
        .collect()
}

/// Diagnostics of one grid mean-field step.
#[derive(Debug, Clone, PartialEq)]
pub struct MfGridDiagnostics {
    pub gain_norm: f64,
    pub cyy_condition: f64,
    /// Fraction of transported mass that fell outside the output grid.
    pub truncated_mass: f64,
    /// `|mass - 1|` of the splatted density before renormalization.
    pub mass_defect: f64,
}

fn splat_chunk(
    joint: &GridMeasure,
    du: usize,
    u_len: usize,
    y_len: usize,
    shifts: &[f64],
    out_axes: &[GridAxis],
    range: std::ops::Range<usize>,
) -> (Vec<f64>, f64) {
    let out_len: usize = out_axes.iter().map(|a| a.n).product();
    let mut buf = vec![0.0; out_len];
    let mut lost = 0.0;
    let mut coords = vec![0.0; joint.dim()];
    let mut cell = vec![(0usize, 0.0f64); du];
    let vol = joint.cell_volume();
    let density = joint.density();
    for flat in range {
        let p = density[flat];
        if p == 0.0 {
            continue;
        }
        let w = p * vol;
        joint.coords_into(flat, &mut coords);
        let ky = flat % y_len;
        debug_assert!(flat / y_len < u_len);
        let mut inside = true;
        for i in 0..du {
            let target = coords[i] + shifts[ky * du + i];
            match out_axes[i].locate(target) {
                Some(c) => cell[i] = c,
                None => {
                    inside = false;
                    break;
                }
            }
        }
        if !inside {
            lost += w;
            continue;
        }
        for mask in 0..(1usize << du) {
            let mut o = 0;
            let mut f = w;
            for i in 0..du {
                let (k, t) = cell[i];
                let up = mask >> i & 1 == 1;
                o = o * out_axes[i].n + k + up as usize;
                f *= if up { t } else { 1.0 - t };
            }
            buf[o] += f;
        }
    }
    (buf, lost)
}

/// Push the joint grid measure through `(u, y) -> u + A (y_obs - y)` by cloud-in-cell deposition
/// onto `out_axes`. Returns the renormalized density and diagnostics.
pub fn splat_transport(
    joint: &GridMeasure,
    dim_u: usize,
    gain: &KalmanGain,
    y_obs: &DVector<f64>,
    out_axes: &[GridAxis],
) -> Result<(GridMeasure, MfGridDiagnostics)> {
    let du = dim_u;
    if out_axes.len() != du || gain.matrix.nrows() != du {
        return Err(Error::Dimension {
            expected: du,
            actual: out_axes.len(),
        });
    }
    let u_len: usize = joint.axes()[..du].iter().map(|a| a.n).product();
    let y_len: usize = joint.axes()[du..].iter().map(|a| a.n).product();
    let y_grid = GridMeasure::zeros(joint.axes()[du..].to_vec());
    let shifts: Vec<f64> = (0..y_len)
        .flat_map(|l| {
            let y = DVector::from_vec(y_grid.node(l));
            let s = &gain.matrix * (y_obs - y);
            s.data.as_vec().clone()
        })
        .collect();
    let total = joint.len();
    let chunk = total.div_ceil(SPLAT_CHUNKS);
    let parts: Vec<(Vec<f64>, f64)> = (0..SPLAT_CHUNKS)
        .into_par_iter()
        .map(|c| {
            let range = (c * chunk).min(total)..((c + 1) * chunk).min(total);
            splat_chunk(joint, du, u_len, y_len, &shifts, out_axes, range)
        })
        .collect();
    let out_len: usize = out_axes.iter().map(|a| a.n).product();
    let mut mass = vec![0.0; out_len];
    let mut lost = 0.0;
    for (buf, l) in &parts {
        for (m, b) in mass.iter_mut().zip(buf) {
            *m += b;
        }
        lost += l;
    }
    let jm = joint.mass();
    let truncated_mass = lost / jm;
    if truncated_mass > BOUNDARY_MASS_LIMIT {
        return Err(Error::Truncation {
            mass: truncated_mass,
            limit: BOUNDARY_MASS_LIMIT,
            context: "transport left the output grid".into(),
        });
    }
    let vol: f64 = out_axes.iter().map(|a| a.spacing()).product();
    let density: Vec<f64> = mass.iter().map(|m| m / vol).collect();
    let mut out = GridMeasure::new(out_axes.to_vec(), density)?;
    let pre = out.normalize()?;
    out.check_boundary(BOUNDARY_MASS_LIMIT, "mean-field analysis")?;
    Ok((
        out,
        MfGridDiagnostics {
            gain_norm: gain.norm(),
            cyy_condition: condition_number(&gain.source.c_yy),
            truncated_mass,
            mass_defect: (pre / jm - 1.0).abs(),
        },
    ))
}

/// One grid mean-field step: predict, lift, gain from quadrature moments of the lift, transport.
pub fn mf_step_grid(
    mu: &GridMeasure,
    y_obs: &DVector<f64>,
    model: &Model,
    policy: &GridPolicy,
) -> Result<(GridMeasure, KalmanGain, MfGridDiagnostics)> {
    let (pred, _) = predict_grid(mu, model, &policy.u_axes)?;
    let y_axes = default_y_axes(&pred, model, policy.y_cells)?;
    let (pi, _) = lift_grid(&pred, model, &y_axes)?;
    let gain = kalman_gain(&joint_blocks(&pi, model.dim_u())?)?;
    let (out, diag) = splat_transport(&pi, model.dim_u(), &gain, y_obs, &policy.u_axes)?;
    Ok((out, gain, diag))
}

/// Mean-field measures in whichever representation the run used.
#[derive(Debug, Clone)]
pub enum MfMeasures {
    Gaussian(Vec<GaussianMeasure>),
    Grid(Vec<GridMeasure>),
}

impl MfMeasures {
    pub fn len(&self) -> usize {
        match self {
            MfMeasures::Gaussian(v) => v.len(),
            MfMeasures::Grid(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean_cov(&self, j: usize) -> (DVector<f64>, DMatrix<f64>) {
        match self {
            MfMeasures::Gaussian(v) => (v[j].mean().clone(), v[j].cov().clone()),
            MfMeasures::Grid(v) => v[j].mean_cov(),
        }
    }

    pub fn as_grid(&self) -> Option<&[GridMeasure]> {
        match self {
            MfMeasures::Grid(v) => Some(v),
            MfMeasures::Gaussian(_) => None,
        }
    }

    pub fn as_gaussian(&self) -> Option<&[GaussianMeasure]> {
        match self {
            MfMeasures::Gaussian(v) => Some(v),
            MfMeasures::Grid(_) => None,
        }
    }
}

/// `mu^{EK}_0..mu^{EK}_J`, plus the gain applied at each step (`gains[j]` maps step `j` to `j+1`
/// and carries the moments of `Q P mu^{EK}_j`).
#[derive(Debug, Clone)]
pub struct MfRun {
    pub measures: MfMeasures,
    pub gains: Vec<KalmanGain>,
    /// Present for grid runs only.
    pub grid_diagnostics: Vec<MfGridDiagnostics>,
}

pub fn mf_run_gaussian(model: &Model, data: &DataRecord) -> Result<MfRun> {
    let mut measures = vec![model.mu0().clone()];
    let mut gains = Vec::with_capacity(data.steps());
    for j in 0..data.steps() {
        let (next, gain) =
            mf_step_gaussian_with_gain(&measures[j], data.observation(j), model).map_err(|e| e.at_step(j + 1))?;
        measures.push(next);
        gains.push(gain);
    }
    Ok(MfRun {
        measures: MfMeasures::Gaussian(measures),
        gains,
        grid_diagnostics: Vec::new(),
    })
}

pub fn mf_run_grid(model: &Model, data: &DataRecord, policy: &GridPolicy) -> Result<MfRun> {
    if policy.u_axes.len() != model.dim_u() {
        return Err(Error::Config(format!(
            "grid has {} state axes, model has dimension {}",
            policy.u_axes.len(),
            model.dim_u()
        )));
    }
    let mu0 = GridMeasure::from_gaussian(model.mu0(), policy.u_axes.clone())?;
    mu0.check_boundary(BOUNDARY_MASS_LIMIT, "initial measure")
        .map_err(|e| e.at_step(0))?;
    let mut measures = vec![mu0];
    let mut gains = Vec::with_capacity(data.steps());
    let mut diags = Vec::with_capacity(data.steps());
    for j in 0..data.steps() {
        let (next, gain, diag) =
            mf_step_grid(&measures[j], data.observation(j), model, policy).map_err(|e| e.at_step(j + 1))?;
        measures.push(next);
        gains.push(gain);
        diags.push(diag);
    }
    Ok(MfRun {
        measures: MfMeasures::Grid(measures),
        gains,
        grid_diagnostics: diags,
    })
}

/// Gaussian path when the model is declared affine, grid path otherwise (a policy is then required).
pub fn mf_run(model: &Model, data: &DataRecord, policy: Option<&GridPolicy>) -> Result<MfRun> {
    if model.is_affine() {
        mf_run_gaussian(model, data)
    } else {
        let policy = policy.ok_or_else(|| Error::Usage("a non-affine model needs a grid policy".into()))?;
        mf_run_grid(model, data, policy)
    }
}

/// CSV `step,gain_norm,cyy_condition,truncated_mass,mass_defect` (steps start at 1).
pub fn write_grid_diagnostics_csv<W: Write>(diags: &[MfGridDiagnostics], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,gain_norm,cyy_condition,truncated_mass,mass_defect")?;
    for (j, d) in diags.iter().enumerate() {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            j + 1,
            d.gain_norm,
            d.cyy_condition,
            d.truncated_mass,
            d.mass_defect
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, VectorFieldSpec};
    use crate::truefilter::kalman_exact;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn joint(c_uy: f64, c_yy: f64) -> JointMoments {
        JointMoments {
            m_u: DVector::zeros(1),
            m_y: DVector::zeros(1),
            c_uu: scalar(1.0),
            c_uy: scalar(c_uy),
            c_yy: scalar(c_yy),
        }
    }

    #[test]
    fn scalar_gains() {
        assert!((kalman_gain(&joint(1.0, 2.0)).unwrap().matrix[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(kalman_gain(&joint(0.0, 2.0)).unwrap().matrix[(0, 0)], 0.0);
        let a = kalman_gain(&joint(2.0, 3.0)).unwrap().matrix[(0, 0)];
        assert!((a - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn singular_cyy_is_degenerate() {
        let mut j = joint(1.0, 1.0);
        j.m_y = DVector::zeros(2);
        j.c_uy = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        j.c_yy = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(kalman_gain(&j), Err(Error::DegenerateGain { .. })));
    }

    #[test]
    fn transport_arithmetic() {
        let g = kalman_gain(&joint(1.0, 2.0)).unwrap();
        let v = |x: f64| DVector::from_element(1, x);
        assert!((transport(&v(1.0), &v(0.5), &g, &v(1.5))[0] - 1.5).abs() < 1e-15);
        assert_eq!(transport(&v(1.0), &v(1.5), &g, &v(1.5))[0], 1.0);
    }

    #[test]
    fn gaussian_step_is_the_kalman_update() {
        let model = Model::new(ModelSpec::scalar_affine(1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0)).unwrap();
        let post = mf_step_gaussian(model.mu0(), &DVector::from_element(1, 1.0), &model).unwrap();
        assert!((post.mean()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((post.cov()[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_ignores_the_datum() {
        let model = Model::new(ModelSpec::scalar_affine(0.9, 0.1, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0)).unwrap();
        let a = mf_step_gaussian(model.mu0(), &DVector::from_element(1, -3.0), &model).unwrap();
        let b = mf_step_gaussian(model.mu0(), &DVector::from_element(1, 5.0), &model).unwrap();
        assert_eq!(a.cov(), b.cov());
    }

    #[test]
    fn non_affine_gaussian_path_is_refused() {
        let mut spec = ModelSpec::scalar_affine(0.8, 0.0, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0);
        spec.dynamics = VectorFieldSpec::affine_plus_bounded(scalar(0.8), DVector::zeros(1), 0.1, crate::model::Perturbation::Sine).unwrap();
        let model = Model::new(spec).unwrap();
        assert!(matches!(
            mf_step_gaussian(model.mu0(), &DVector::zeros(1), &model),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            mf_run(&model, &DataRecord::from_observations(1, vec![]).unwrap(), None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn grid_step_tracks_gaussian_step() {
        let model = Model::new(ModelSpec::scalar_affine(0.9, 0.0, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0)).unwrap();
        let y = DVector::from_element(1, 0.7);
        let exact = mf_step_gaussian(model.mu0(), &y, &model).unwrap();
        let policy = GridPolicy::uniform(1, -12.0, 12.0, 1024).unwrap();
        let mu = GridMeasure::from_gaussian(model.mu0(), policy.u_axes.clone()).unwrap();
        let (out, _, diag) = mf_step_grid(&mu, &y, &model, &policy).unwrap();
        let (m, c) = out.mean_cov();
        assert!((m[0] - exact.mean()[0]).abs() < 1e-4);
        assert!((c[(0, 0)] - exact.cov()[(0, 0)]).abs() < 1e-4);
        assert!(diag.mass_defect < 1e-6);
        assert!(diag.truncated_mass < 1e-12);
    }

    #[test]
    fn gaussian_run_matches_kalman() {
        let model = Model::new(ModelSpec::scalar_affine(0.9, 0.0, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0)).unwrap();
        let data = crate::model::simulate_truth(&model, 10, 3);
        let run = mf_run(&model, &data, None).unwrap();
        let k = kalman_exact(&model, &data).unwrap();
        let g = run.measures.as_gaussian().unwrap();
        for (a, b) in g.iter().zip(&k) {
            assert!((a.mean() - b.mean()).amax() < 1e-12);
            assert!((a.cov() - b.cov()).amax() < 1e-12);
        }
        assert_eq!(run.gains.len(), 10);
        assert!(run.gains.iter().all(|g| g.residual() < 1e-10));
    }
}

//! Numerical checks of the moment, covariance and stability inequalities that hold for the
//! prediction, lift and analysis operators, evaluated with measured moments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{max_eigenvalue, min_eigenvalue, op_norm, trace};
use crate::meanfield::{kalman_gain, mf_step_grid, splat_transport};
use crate::measures::{joint_blocks, radius_from_moments, weighted_tv, EmpiricalMeasure, GridAxis, GridMeasure, Measure};
use crate::model::{DataRecord, Model, ModelSpec, Perturbation, VectorFieldSpec};
use crate::rate::fit_rate;
use crate::rng::{NoiseRole, NoiseStream};
use crate::truefilter::{default_y_axes, filter_run, lift_grid, predict_grid, GridPolicy};

/// Tolerated numerical slack when comparing two sides of an inequality.
pub const BOUND_SLACK: f64 = 1e-10;

/// Amplitudes used for the perturbation-linearity slope.
pub const PERTURBATION_AMPLITUDES: [f64; 5] = [0.0025, 0.005, 0.01, 0.02, 0.04];

/// `lhs <= rhs`, with the name of the inequality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundCheck {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
        }
    }

    /// `A <= B` in the Loewner order, recorded as `-lambda_min(B - A) <= 0`.
    pub fn psd(name: impl Into<String>, lower: &DMatrix<f64>, upper: &DMatrix<f64>) -> Self {
        Self::new(name, -min_eigenvalue(&(upper - lower)), 0.0)
    }

    pub fn excess(&self) -> f64 {
        if self.lhs.is_nan() || self.rhs.is_nan() {
            return f64::INFINITY;
        }
        self.lhs - self.rhs
    }

    pub fn holds(&self, slack: f64) -> bool {
        self.excess() <= slack
    }
}

/// Outcome of one suite over many random instances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    pub checks: usize,
    pub violations: usize,
    pub max_excess: f64,
    /// Fitted slopes, for suites that measure a rate.
    pub slopes: Vec<f64>,
}

impl SuiteReport {
    fn from_checks(name: &str, instances: usize, checks: &[BoundCheck], slack: f64) -> Self {
        Self {
            name: name.to_string(),
            instances,
            checks: checks.len(),
            violations: checks.iter().filter(|c| !c.holds(slack)).count(),
            max_excess: checks.iter().map(|c| c.excess()).fold(f64::NEG_INFINITY, f64::max),
            slopes: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn eye(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// Mean and covariance bounds for `P mu`.
pub fn prediction_bounds(mu: &GridMeasure, model: &Model) -> Result<Vec<BoundCheck>> {
    let (p, _) = predict_grid(mu, model, mu.axes())?;
    let kappa = model.dynamics().growth();
    let m1 = mu.abs_moment(1)?;
    let m2 = mu.abs_moment(2)?;
    let (mean, cov) = p.mean_cov();
    let d = model.dim_u();
    Ok(vec![
        BoundCheck::new("prediction mean", mean.norm(), kappa * (1.0 + m1)),
        BoundCheck::psd("prediction covariance lower", model.sigma(), &cov),
        BoundCheck::psd(
            "prediction covariance upper",
            &cov,
            &(model.sigma() + eye(d) * (2.0 * kappa * kappa * (1.0 + m2))),
        ),
    ])
}

/// `1 + tr Sigma + 2 kappa_Psi^2 (1 + M_2(mu))`
fn lift_scale(model: &Model, m2: f64) -> f64 {
    let k = model.dynamics().growth();
    1.0 + trace(model.sigma()) + 2.0 * k * k * (1.0 + m2)
}

/// Mean and covariance bounds for `Q P mu`, including `C^{yy} >= Gamma`.
pub fn lift_bounds(mu: &GridMeasure, model: &Model, y_cells: usize) -> Result<Vec<BoundCheck>> {
    let (p, _) = predict_grid(mu, model, mu.axes())?;
    let y_axes = default_y_axes(&p, model, y_cells)?;
    let (pi, _) = lift_grid(&p, model, &y_axes)?;
    let jm = joint_blocks(&pi, model.dim_u())?;
    let (du, dy) = (model.dim_u(), model.dim_y());
    let kp = model.dynamics().growth();
    let kh = model.observation().growth();
    let m1 = mu.abs_moment(1)?;
    let m2 = mu.abs_moment(2)?;
    let s = lift_scale(model, m2);
    let (gamma, sigma) = (model.gamma_min(), model.sigma_min());

    let mut upper = DMatrix::zeros(du + dy, du + dy);
    upper
        .view_mut((0, 0), (du, du))
        .copy_from(&(eye(du) * (4.0 * kp * kp * (1.0 + m2)) + model.sigma() * 2.0));
    upper
        .view_mut((du, du), (dy, dy))
        .copy_from(&(eye(dy) * (4.0 * kh * kh * s) + model.gamma()));
    let c = jm.full_cov();
    let lower = gamma * (2.0 * sigma).min(gamma + 4.0 * kh * kh * s) / (2.0 * gamma + 8.0 * kh * kh * s);
    let mean_u = kp * (1.0 + m1);
    let mean_y = kh * (2.0 * s).sqrt();
    let radius = 1f64
        .max(mean_u.hypot(mean_y))
        .max(max_eigenvalue(&upper).sqrt())
        .max(1.0 / lower.sqrt());
    Ok(vec![
        BoundCheck::new("lift radius", radius_from_moments(&jm.mean(), &c), radius),
        BoundCheck::new("lift state mean", jm.m_u.norm(), mean_u),
        BoundCheck::new("lift observation mean", jm.m_y.norm(), mean_y),
        BoundCheck::psd("lift covariance upper", &c, &upper),
        BoundCheck::new("lift covariance lower", lower, min_eigenvalue(&c)),
        BoundCheck::psd("lift observation covariance dominates Gamma", model.gamma(), &jm.c_yy),
    ])
}

/// `|M(mu) - M(nu)| <= d_g / 2` and `||C(mu) - C(nu)|| <= (1 + |M(mu) + M(nu)| / 2) d_g`.
pub fn moment_difference_bounds<A: Measure + ?Sized, B: Measure + ?Sized>(mu: &A, nu: &B, dg: f64) -> Result<Vec<BoundCheck>> {
    let (ma, ca) = mu.mean_cov()?;
    let (mb, cb) = nu.mean_cov()?;
    Ok(vec![
        BoundCheck::new("mean difference", (&ma - &mb).norm(), 0.5 * dg),
        BoundCheck::new(
            "covariance difference",
            op_norm(&(ca - cb)),
            (1.0 + 0.5 * (ma + mb).norm()) * dg,
        ),
    ])
}

/// `E[(X - a)(X - a)^T] - C(X)` is positive semidefinite and equals `(E X - a)(E X - a)^T`.
pub fn psd_gap_bounds(xs: &EmpiricalMeasure, a: &DVector<f64>) -> Vec<BoundCheck> {
    let (m, c) = xs.mean_cov();
    let d = xs.dim();
    let mut second = DMatrix::zeros(d, d);
    for x in xs.particles() {
        let z = x - a;
        second.ger(1.0 / xs.len() as f64, &z, &z, 1.0);
    }
    let gap = &second - &c;
    let shift = &m - a;
    let expected = &shift * shift.transpose();
    let scale = 1.0 + second.amax();
    vec![
        BoundCheck::psd("second moment about a point dominates covariance", &c, &second),
        BoundCheck::new(
            "gap equals the mean shift outer product",
            (gap - expected).amax() / scale,
            0.0,
        ),
    ]
}

/// `d_g(P mu, P nu) <= (1 + 2 kappa_Psi^2 + tr Sigma) d_g(mu, nu)`.
pub fn prediction_lipschitz(mu: &GridMeasure, nu: &GridMeasure, model: &Model) -> Result<BoundCheck> {
    let (pm, _) = predict_grid(mu, model, mu.axes())?;
    let (pn, _) = predict_grid(nu, model, nu.axes())?;
    let k = model.dynamics().growth();
    Ok(BoundCheck::new(
        "prediction Lipschitz",
        weighted_tv(&pm, &pn)?,
        (1.0 + 2.0 * k * k + trace(model.sigma())) * weighted_tv(mu, nu)?,
    ))
}

fn union_axes(a: &[GridAxis], b: &[GridAxis]) -> Result<Vec<GridAxis>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| GridAxis::new(x.lo.min(y.lo), x.hi.max(y.hi), x.n.max(y.n)))
        .collect()
}

/// `d_g(Q mu, Q nu) <= (1 + 2 kappa_h^2 + tr Gamma) d_g(mu, nu)` with the joint weight
/// `1 + |u|^2 + |y|^2`.
pub fn lift_lipschitz(mu: &GridMeasure, nu: &GridMeasure, model: &Model, y_cells: usize) -> Result<BoundCheck> {
    let y_axes = union_axes(
        &default_y_axes(mu, model, y_cells)?,
        &default_y_axes(nu, model, y_cells)?,
    )?;
    let (qm, _) = lift_grid(mu, model, &y_axes)?;
    let (qn, _) = lift_grid(nu, model, &y_axes)?;
    let k = model.observation().growth();
    Ok(BoundCheck::new(
        "lift Lipschitz",
        weighted_tv(&qm, &qn)?,
        (1.0 + 2.0 * k * k + trace(model.gamma())) * weighted_tv(mu, nu)?,
    ))
}

/// `d_g(T pi, T p) / d_g(pi, p)` where each joint is transported with the gain of its own moments.
pub fn transport_stability_ratio(
    pi: &GridMeasure,
    p: &GridMeasure,
    dim_u: usize,
    y_obs: &DVector<f64>,
    out_axes: &[GridAxis],
) -> Result<f64> {
    let ga = kalman_gain(&joint_blocks(pi, dim_u)?)?;
    let gb = kalman_gain(&joint_blocks(p, dim_u)?)?;
    let (ta, _) = splat_transport(pi, dim_u, &ga, y_obs, out_axes)?;
    let (tb, _) = splat_transport(p, dim_u, &gb, y_obs, out_axes)?;
    Ok(weighted_tv(&ta, &tb)? / weighted_tv(pi, p)?)
}

/// Transport stability ratios over random instances: `pi = Q P mu`, `p = Q P nu` on a common
/// joint grid, conditioned on the first simulated observation.
pub fn transport_stability_suite(seed: u64, instances: usize) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let sampler = InstanceSampler::new(seed);
    (0..instances)
        .into_par_iter()
        .map(|k| {
            let inst = sampler.instance(k)?;
            let m = &inst.model;
            let (pm, _) = predict_grid(&inst.mu, m, &inst.axes)?;
            let (pn, _) = predict_grid(&inst.nu, m, &inst.axes)?;
            let y_axes = union_axes(
                &default_y_axes(&pm, m, inst.y_cells)?,
                &default_y_axes(&pn, m, inst.y_cells)?,
            )?;
            let (qa, _) = lift_grid(&pm, m, &y_axes)?;
            let (qb, _) = lift_grid(&pn, m, &y_axes)?;
            let data = crate::model::simulate_truth(m, 1, seed ^ k as u64);
            transport_stability_ratio(&qa, &qb, m.dim_u(), data.observation(0), &inst.axes)
                .map_err(|e| Error::Internal(format!("instance {k}: {e}")))
        })
        .collect()
}

/// Moment recursion for the exact filter. With `s = 1 + tr Sigma + 2 kappa_Psi^2 (1 + M_2(mu_j))`
/// and the normalizer bounded below by `exp(-||Gamma^-1|| (|y|^2 + 2 kappa_h^2 s))`:
/// `M_2(mu_{j+1}) <= (s - 1) / Z` and
/// `M_4(mu_{j+1}) <= 8 (8 kappa_Psi^4 (1 + M_4) + (tr Sigma)^2 + 2 tr(Sigma^2)) / Z`.
pub fn filter_moment_bound(model: &Model, m2: f64, m4: f64, y_norm: f64) -> (f64, f64) {
    let kp = model.dynamics().growth();
    let kh = model.observation().growth();
    let s = lift_scale(model, m2);
    let ginv = 1.0 / model.gamma_min();
    let inv_z = (ginv * (y_norm * y_norm + 2.0 * kh * kh * s)).exp();
    let ts = trace(model.sigma());
    let ts2 = trace(&(model.sigma() * model.sigma()));
    let num4 = 8.0 * (8.0 * kp.powi(4) * (1.0 + m4) + ts * ts + 2.0 * ts2);
    ((s - 1.0) * inv_z, num4 * inv_z)
}

/// Per-step and iterated moment bounds along an exact grid filter run.
pub fn filter_moment_checks(model: &Model, data: &DataRecord, policy: &GridPolicy) -> Result<Vec<BoundCheck>> {
    let run = filter_run(model, data, policy)?;
    let d = &run.diagnostics;
    let mut out = Vec::new();
    let (mut it2, mut it4) = (d[0].m2, d[0].m4);
    for j in 0..data.steps() {
        let y = data.observation(j).norm();
        let (b2, b4) = filter_moment_bound(model, d[j].m2, d[j].m4, y);
        out.push(BoundCheck::new(format!("filter M2 step {}", j + 1), d[j + 1].m2, b2));
        out.push(BoundCheck::new(format!("filter M4 step {}", j + 1), d[j + 1].m4, b4));
        let (n2, n4) = filter_moment_bound(model, it2, it4, y);
        it2 = n2;
        it4 = n4;
        out.push(BoundCheck::new(format!("filter M2 iterated {}", j + 1), d[j + 1].m2, it2));
        out.push(BoundCheck::new(format!("filter M4 iterated {}", j + 1), d[j + 1].m4, it4));
    }
    Ok(out)
}

/// `M_q(T pi) <= 3^{q-1} (E|u|^q + ||A||^q (|y_obs|^q + E|y|^q))` for one grid mean-field step,
/// with every right-hand quantity measured on the discretized `pi = Q P mu`.
pub fn mean_field_moment_checks(
    mu: &GridMeasure,
    y_obs: &DVector<f64>,
    model: &Model,
    policy: &GridPolicy,
) -> Result<Vec<BoundCheck>> {
    let (out, gain, _) = mf_step_grid(mu, y_obs, model, policy)?;
    let (p, _) = predict_grid(mu, model, &policy.u_axes)?;
    let y_axes = default_y_axes(&p, model, policy.y_cells)?;
    let (pi, _) = lift_grid(&p, model, &y_axes)?;
    let du = model.dim_u();
    let a = gain.norm();
    let mut checks = Vec::new();
    for q in [2u32, 4] {
        let eu = pi.expect_fn(|x| x[..du].iter().map(|v| v * v).sum::<f64>().powf(q as f64 / 2.0));
        let ey = pi.expect_fn(|x| x[du..].iter().map(|v| v * v).sum::<f64>().powf(q as f64 / 2.0));
        let rhs = 3f64.powi(q as i32 - 1) * (eu + a.powi(q as i32) * (y_obs.norm().powi(q as i32) + ey));
        checks.push(BoundCheck::new(format!("mean-field M{q}"), out.abs_moment(q)?, rhs));
    }
    Ok(checks)
}

/// `d_g(P_0 mu, P mu)` for `Psi = Psi_0 + eps p`, over a list of amplitudes; returns the
/// distances and the fitted log-log slope.
pub fn perturbation_scaling(
    mu: &GridMeasure,
    model: &Model,
    perturbation: Perturbation,
    eps: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let f0 = model.dynamics().affine_base();
    let base = model.with_fields(f0.clone(), model.observation().clone())?;
    let (p0, _) = predict_grid(mu, &base, mu.axes())?;
    let mut dists = Vec::with_capacity(eps.len());
    for &e in eps {
        let f = VectorFieldSpec::affine_plus_bounded(f0.matrix().clone(), f0.offset().clone(), e, perturbation)?;
        let m = base.with_fields(f, model.observation().clone())?;
        let (pe, _) = predict_grid(mu, &m, mu.axes())?;
        dists.push(weighted_tv(&p0, &pe)?);
    }
    let fit = fit_rate(eps, &dists)?;
    Ok((dists, fit.slope))
}

/// Reproducible random models and measures for the suites.
#[derive(Debug, Clone)]
pub struct InstanceSampler {
    stream: NoiseStream,
}

/// One random test case.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: Model,
    pub axes: Vec<GridAxis>,
    pub mu: GridMeasure,
    pub nu: GridMeasure,
    pub y_cells: usize,
}

impl InstanceSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            stream: NoiseStream::new(seed, 0),
        }
    }

    fn rng(&self, k: usize) -> ChaCha8Rng {
        self.stream.rng(k as u64, 0, NoiseRole::Instance)
    }

    /// Instance `k`: a one-dimensional state for even `k`, two-dimensional for odd `k`,
    /// with a perturbed affine dynamics and observation and two Gaussian-mixture measures.
    pub fn instance(&self, k: usize) -> Result<Instance> {
        let mut rng = self.rng(k);
        let du = if k.is_multiple_of(2) { 1 } else { 2 };
        let dy = 1;
        let (half, n, y_cells) = if du == 1 { (16.0, 512, 256) } else { (12.0, 56, 64) };
        let scale = if du == 1 { 1.0 } else { 0.6 };
        let pick = |rng: &mut ChaCha8Rng| Perturbation::ALL[rng.random_range(0..3)];
        let uniform_matrix = |rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64| {
            DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
        };
        let mut m = uniform_matrix(&mut rng, du, du, 1.0);
        let norm = op_norm(&m);
        if norm > 0.9 {
            m *= 0.9 / norm;
        }
        let b = DVector::from_fn(du, |_, _| rng.random_range(-scale..scale));
        let eps = rng.random_range(0.0..0.5 * scale);
        let p = pick(&mut rng);
        let dynamics = VectorFieldSpec::affine_plus_bounded(m, b, eps, p)?;
        let hm = uniform_matrix(&mut rng, dy, du, 1.5);
        let w = DVector::from_fn(dy, |_, _| rng.random_range(-1.0..1.0));
        let eh = rng.random_range(0.0..0.5);
        let observation = VectorFieldSpec::affine_plus_bounded(hm, w, eh, pick(&mut rng))?;
        let spd = |rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64| {
            let ev: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let q = if d == 2 {
                DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
            } else {
                eye(1)
            };
            let out = &q * DMatrix::from_diagonal(&DVector::from_vec(ev)) * q.transpose();
            (&out + out.transpose()) * 0.5
        };
        let (slo, shi) = if du == 1 { (0.2, 1.5) } else { (0.25, 0.8) };
        let spec = ModelSpec {
            dim_u: du,
            dim_y: dy,
            dynamics,
            observation,
            sigma: spd(&mut rng, du, slo, shi),
            gamma: spd(&mut rng, dy, 0.2, 1.5),
            m0: DVector::from_fn(du, |_, _| rng.random_range(-scale..scale)),
            c0: spd(&mut rng, du, 0.3, 1.0),
        };
        let model = Model::new(spec)?;
        let axes = vec![GridAxis::new(-half, half, n)?; du];
        let mu = self.mixture(&mut rng, &axes, scale)?;
        let nu = self.mixture(&mut rng, &axes, scale)?;
        Ok(Instance {
            model,
            axes,
            mu,
            nu,
            y_cells,
        })
    }

    fn mixture(&self, rng: &mut ChaCha8Rng, axes: &[GridAxis], scale: f64) -> Result<GridMeasure> {
        let d = axes.len();
        let parts = rng.random_range(1..=3);
        let comps: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..parts)
            .map(|_| {
                (
                    rng.random_range(0.2..1.0),
                    (0..d).map(|_| rng.random_range(-2.0 * scale..2.0 * scale)).collect(),
                    (0..d).map(|_| rng.random_range(0.3..1.2) * scale.max(0.8)).collect(),
                )
            })
            .collect();
        let mut g = GridMeasure::from_fn(axes.to_vec(), |x| {
            comps
                .iter()
                .map(|(w, m, v)| {
                    let q: f64 = x.iter().zip(m).zip(v).map(|((x, m), v)| (x - m) * (x - m) / v).sum();
                    let det: f64 = v.iter().product();
                    w * (-0.5 * q).exp() / det.sqrt()
                })
                .sum()
        })?;
        g.normalize()?;
        Ok(g)
    }

    /// Random empirical measure and reference point for the covariance-gap check.
    pub fn point_cloud(&self, k: usize) -> Result<(EmpiricalMeasure, DVector<f64>)> {
        let mut rng = self.stream.rng(k as u64, 1, NoiseRole::Instance);
        let d = rng.random_range(1..=4);
        let n = rng.random_range(2..200);
        let pts: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let a = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
        Ok((EmpiricalMeasure::new(pts)?, a))
    }
}

/// Acceptance thresholds for [`run_suites`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteTolerances {
    /// Numerical slack allowed on every inequality.
    pub slack: f64,
    /// Allowed `|slope - 1|` for the perturbation linearity suite.
    pub slope_deviation: f64,
}

impl Default for SuiteTolerances {
    fn default() -> Self {
        Self {
            slack: BOUND_SLACK,
            slope_deviation: 0.15,
        }
    }
}

/// Run every suite over `instances` random cases.
pub fn run_suites(seed: u64, instances: usize, tol: &SuiteTolerances) -> Result<Vec<SuiteReport>> {
    use rayon::prelude::*;
    if instances == 0 {
        return Err(Error::Usage("need at least one instance".into()));
    }
    let sampler = InstanceSampler::new(seed);
    type PerInstance = (Vec<BoundCheck>, Vec<BoundCheck>, Vec<BoundCheck>, Vec<BoundCheck>, Vec<BoundCheck>, Vec<BoundCheck>, Vec<BoundCheck>, Vec<BoundCheck>, f64);
    let per: Vec<PerInstance> = (0..instances)
        .into_par_iter()
        .map(|k| -> Result<PerInstance> {
            let inst = sampler.instance(k)?;
            let m = &inst.model;
            let policy = GridPolicy::new(inst.axes.clone(), inst.y_cells);
            let b1 = prediction_bounds(&inst.mu, m)?;
            let b2 = lift_bounds(&inst.mu, m, inst.y_cells)?;
            let b4 = moment_difference_bounds(&inst.mu, &inst.nu, weighted_tv(&inst.mu, &inst.nu)?)?;
            let data = crate::model::simulate_truth(m, 3, seed ^ k as u64);
            let b6 = filter_moment_checks(m, &data, &policy)?;
            let b7 = mean_field_moment_checks(&inst.mu, data.observation(0), m, &policy)?;
            let lp = vec![prediction_lipschitz(&inst.mu, &inst.nu, m)?];
            let lq = vec![lift_lipschitz(&inst.mu, &inst.nu, m, inst.y_cells)?];
            let (cloud, a) = sampler.point_cloud(k)?;
            let a1 = psd_gap_bounds(&cloud, &a);
            let (_, slope) = perturbation_scaling(
                &inst.mu,
                m,
                m.dynamics().perturbation().unwrap_or(Perturbation::Sine),
                &PERTURBATION_AMPLITUDES,
            )?;
            Ok((b1, b2, b4, b6, b7, lp, lq, a1, slope))
        })
        .enumerate()
        .map(|(k, r)| r.map_err(|e| Error::Internal(format!("instance {k}: {e}"))))
        .collect::<Result<_>>()?;
    let collect = |f: &dyn Fn(&PerInstance) -> &Vec<BoundCheck>| -> Vec<BoundCheck> {
        per.iter().flat_map(|p| f(p).iter().cloned()).collect()
    };
    let mut reports = vec![
        SuiteReport::from_checks("prediction moments", instances, &collect(&|p| &p.0), tol.slack),
        SuiteReport::from_checks("lift moments", instances, &collect(&|p| &p.1), tol.slack),
        SuiteReport::from_checks("moment differences", instances, &collect(&|p| &p.2), tol.slack),
        SuiteReport::from_checks("filter moment recursion", instances, &collect(&|p| &p.3), tol.slack),
        SuiteReport::from_checks("mean-field moment recursion", instances, &collect(&|p| &p.4), tol.slack),
        SuiteReport::from_checks("prediction Lipschitz", instances, &collect(&|p| &p.5), tol.slack),
        SuiteReport::from_checks("lift Lipschitz", instances, &collect(&|p| &p.6), tol.slack),
        SuiteReport::from_checks("covariance gap", instances, &collect(&|p| &p.7), tol.slack),
    ];
    let slopes: Vec<f64> = per.iter().map(|p| p.8).collect();
    let slope_checks: Vec<BoundCheck> = slopes
        .iter()
        .map(|s| BoundCheck::new("perturbation slope deviation", (s - 1.0).abs(), tol.slope_deviation))
        .collect();
    let mut eps = SuiteReport::from_checks("perturbation linearity", instances, &slope_checks, 0.0);
    eps.slopes = slopes;
    reports.push(eps);
    Ok(reports)
}

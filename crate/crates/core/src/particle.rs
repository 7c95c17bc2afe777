//! Finite ensembles: the perturbed-observation ensemble Kalman filter, mean-field replicas driven
//! by the same noise, and the Monte Carlo experiments built on them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, right_solve_spd, symmetrize};
use crate::meanfield::{mf_run, MfRun};
use crate::measures::{cross_cov_of, mean_cov_of, EmpiricalMeasure, Observable};
use crate::model::{DataRecord, Model};
use crate::rate::{fit_rate, fit_rate_bootstrap, rmse, RateFit};
use crate::rng::{NoiseRole, NoiseStream};
use crate::truefilter::{filter_run, kalman_exact, GridPolicy};

/// Moment orders reported by the coupling diagnostics.
pub const MOMENT_ORDERS: [u32; 3] = [1, 2, 4];

/// Number of consecutive particle pairs spot-checked against the observable bounds per step.
const BOUND_SPOT_CHECKS: usize = 32;

/// Particles `u^(i)_j` and the noise stream they draw from.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub particles: Vec<DVector<f64>>,
    pub step: usize,
    pub stream: NoiseStream,
}

impl EnsembleState {
    /// `N` draws from `mu_0`.
    pub fn initial(model: &Model, n: usize, stream: NoiseStream) -> Result<Self> {
        if n == 0 {
            return Err(Error::Usage("ensemble size must be positive".into()));
        }
        let particles = (0..n as u64)
            .map(|i| model.mu0().mean() + stream.correlated_normal(i, 0, NoiseRole::Init, model.chol_c0()))
            .collect();
        Ok(Self {
            particles,
            step: 0,
            stream,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn empirical(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::new(self.particles.clone())
    }
}

/// Dynamics noise `xi^(i)_j` and observation noise `eta^(i)_{j+1}` for one step.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub xi: Vec<DVector<f64>>,
    pub eta: Vec<DVector<f64>>,
}

pub fn draw_step_noise(model: &Model, stream: &NoiseStream, n: usize, step: usize) -> StepNoise {
    let j = step as u64;
    StepNoise {
        xi: (0..n as u64)
            .map(|i| stream.correlated_normal(i, j, NoiseRole::Dynamics, model.chol_sigma()))
            .collect(),
        eta: (0..n as u64)
            .map(|i| stream.correlated_normal(i, j + 1, NoiseRole::Observation, model.chol_gamma()))
            .collect(),
    }
}

/// What one analysis step used.
#[derive(Debug, Clone, PartialEq)]
pub struct EnkfStepInfo {
    pub gain: DMatrix<f64>,
    /// Smallest eigenvalue of `C^{hh} + Gamma`.
    pub innovation_min_eig: f64,
}

/// Forecast `v = Psi(u) + xi`, simulated data `y = h(v) + eta`, and the analysis with the
/// empirical gain `C^{uh} (C^{hh} + Gamma)^{-1}` (1/N normalization).
pub fn enkf_step_with_noise(
    particles: &[DVector<f64>],
    y_obs: &DVector<f64>,
    model: &Model,
    noise: &StepNoise,
) -> Result<(Vec<DVector<f64>>, EnkfStepInfo)> {
    if y_obs.len() != model.dim_y() {
        return Err(Error::Dimension {
            expected: model.dim_y(),
            actual: y_obs.len(),
        });
    }
    if noise.xi.len() != particles.len() || noise.eta.len() != particles.len() {
        return Err(Error::Internal("noise does not match the ensemble size".into()));
    }
    let forecast: Vec<DVector<f64>> = particles
        .iter()
        .zip(&noise.xi)
        .map(|(u, xi)| model.psi(u) + xi)
        .collect();
    let hv: Vec<DVector<f64>> = forecast.iter().map(|v| model.h(v)).collect();
    let (c_uh, c_hh) = cross_cov_of(&forecast, &hv);
    let s = symmetrize(&(c_hh + model.gamma()));
    let innovation_min_eig = min_eigenvalue(&s);
    if innovation_min_eig < model.gamma_min() * (1.0 - 1e-9) {
        return Err(Error::Internal(format!(
            "innovation covariance eigenvalue {innovation_min_eig:.3e} below the observation noise floor"
        )));
    }
    let gain = right_solve_spd(&c_uh, &s).ok_or_else(|| Error::Internal("innovation solve failed".into()))?;
    let analysis = forecast
        .into_iter()
        .zip(hv)
        .zip(&noise.eta)
        .map(|((v, h), eta)| {
            let innovation = y_obs - h - eta;
            v + &gain * innovation
        })
        .collect();
    Ok((
        analysis,
        EnkfStepInfo {
            gain,
            innovation_min_eig,
        },
    ))
}

/// One ensemble step, drawing noise at the ensemble's own stream position.
pub fn enkf_step(ens: &EnsembleState, y_obs: &DVector<f64>, model: &Model) -> Result<(EnsembleState, EnkfStepInfo)> {
    let noise = draw_step_noise(model, &ens.stream, ens.len(), ens.step);
    let (particles, info) = enkf_step_with_noise(&ens.particles, y_obs, model, &noise)?;
    Ok((
        EnsembleState {
            particles,
            step: ens.step + 1,
            stream: ens.stream,
        },
        info,
    ))
}

fn spot_check_bounds(particles: &[DVector<f64>], observables: &[Observable]) -> Result<()> {
    for pair in particles.windows(2).take(BOUND_SPOT_CHECKS) {
        for phi in observables {
            if !phi.satisfies_bounds(pair[0].as_slice(), pair[1].as_slice()) {
                return Err(Error::Internal(format!("observable {phi} violates its declared bounds")));
            }
        }
    }
    Ok(())
}

/// `mu^{EK,N}_0..mu^{EK,N}_J` and the catalog observables along the way.
#[derive(Debug, Clone)]
pub struct EnkfRun {
    pub ensembles: Vec<EmpiricalMeasure>,
    pub observables: Vec<Observable>,
    /// `values[j][k]` is the ensemble average of `observables[k]` at step `j`.
    pub values: Vec<Vec<f64>>,
    pub steps: Vec<EnkfStepInfo>,
}

pub fn enkf_run(model: &Model, data: &DataRecord, n: usize, seed: u64, replicate: u64) -> Result<EnkfRun> {
    let observables = Observable::catalog(model.dim_u());
    let mut ens = EnsembleState::initial(model, n, NoiseStream::new(seed, replicate))?;
    let record = |e: &EnsembleState| -> Result<(EmpiricalMeasure, Vec<f64>)> {
        spot_check_bounds(&e.particles, &observables)?;
        let emp = e.empirical()?;
        let vals = observables.iter().map(|phi| emp.average(|u| phi.eval_vec(u))).collect();
        Ok((emp, vals))
    };
    let (emp, vals) = record(&ens).map_err(|e| e.at_step(0))?;
    let mut ensembles = vec![emp];
    let mut values = vec![vals];
    let mut steps = Vec::with_capacity(data.steps());
    for j in 0..data.steps() {
        let (next, info) = enkf_step(&ens, data.observation(j), model).map_err(|e| e.at_step(j + 1))?;
        ens = next;
        let (emp, vals) = record(&ens).map_err(|e| e.at_step(j + 1))?;
        ensembles.push(emp);
        values.push(vals);
        steps.push(info);
    }
    Ok(EnkfRun {
        ensembles,
        observables,
        values,
        steps,
    })
}

/// Final particles only; used by the Monte Carlo sweeps.
pub fn enkf_final(model: &Model, data: &DataRecord, n: usize, stream: NoiseStream) -> Result<Vec<DVector<f64>>> {
    let mut ens = EnsembleState::initial(model, n, stream)?;
    for j in 0..data.steps() {
        ens = enkf_step(&ens, data.observation(j), model).map_err(|e| e.at_step(j + 1))?.0;
    }
    Ok(ens.particles)
}

/// Mean-field quantities the replicas need: the gain `A_j` of `Q P mu^{EK}_j` and the covariance
/// of `P mu^{EK}_j`, for `j = 0..J-1`.
#[derive(Debug, Clone)]
pub struct MeanFieldReference {
    pub gains: Vec<DMatrix<f64>>,
    pub predicted_cov: Vec<DMatrix<f64>>,
    /// Resolution of the grid surrogate, when the moments came from the grid path.
    pub grid: Option<GridPolicy>,
}

impl MeanFieldReference {
    pub fn from_run(run: &MfRun, grid: Option<GridPolicy>) -> Self {
        Self {
            gains: run.gains.iter().map(|g| g.matrix.clone()).collect(),
            predicted_cov: run.gains.iter().map(|g| g.source.c_uu.clone()).collect(),
            grid: if run.measures.as_grid().is_some() { grid } else { None },
        }
    }

    /// Closed form for affine models, grid moments otherwise.
    pub fn compute(model: &Model, data: &DataRecord, grid: Option<&GridPolicy>) -> Result<Self> {
        let run = mf_run(model, data, grid)?;
        Ok(Self::from_run(&run, grid.cloned()))
    }

    pub fn steps(&self) -> usize {
        self.gains.len()
    }
}

/// Per-step statistics of one coupled run (step 0 included).
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingStats {
    /// Particle average of `|u - u_bar|^p` for each order in [`MOMENT_ORDERS`].
    pub abs_pow_mean: [f64; 3],
    /// `||C(empirical v_bar_j) - C(P mu^{EK}_{j-1})||`; zero at step 0.
    pub z: f64,
    /// Particle average of `|y_j - h(v_bar) - eta|^t`; zero at step 0.
    pub innovation_pow_mean: [f64; 3],
}

/// Interacting ensemble and mean-field replicas sharing every noise draw.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub interacting: Vec<Vec<DVector<f64>>>,
    pub replicas: Vec<Vec<DVector<f64>>>,
    pub stats: Vec<CouplingStats>,
}

fn pow_means(diffs: impl Iterator<Item = f64>, n: usize) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for d in diffs {
        for (a, &p) in acc.iter_mut().zip(&MOMENT_ORDERS) {
            *a += d.powi(p as i32);
        }
    }
    acc.map(|a| a / n as f64)
}

pub fn coupled_run(
    model: &Model,
    data: &DataRecord,
    n: usize,
    seed: u64,
    replicate: u64,
    reference: &MeanFieldReference,
) -> Result<CoupledRun> {
    if !model.observation().is_affine() {
        return Err(Error::Unsupported(
            "the synchronous coupling is only available for linear observation operators".into(),
        ));
    }
    if reference.steps() != data.steps() {
        return Err(Error::Internal(format!(
            "mean-field reference covers {} steps, data has {}",
            reference.steps(),
            data.steps()
        )));
    }
    let stream = NoiseStream::new(seed, replicate);
    let init = EnsembleState::initial(model, n, stream)?;
    let mut u = init.particles;
    let mut ubar = u.clone();
    let mut interacting = vec![u.clone()];
    let mut replicas = vec![ubar.clone()];
    let mut stats = vec![CouplingStats {
        abs_pow_mean: pow_means(u.iter().zip(&ubar).map(|(a, b)| (a - b).norm()), n),
        z: 0.0,
        innovation_pow_mean: [0.0; 3],
    }];
    for j in 0..data.steps() {
        let y_obs = data.observation(j);
        let noise = draw_step_noise(model, &stream, n, j);
        let (next, _) = enkf_step_with_noise(&u, y_obs, model, &noise).map_err(|e| e.at_step(j + 1))?;
        u = next;

        let vbar: Vec<DVector<f64>> = ubar.iter().zip(&noise.xi).map(|(x, xi)| model.psi(x) + xi).collect();
        let ybar: Vec<DVector<f64>> = vbar.iter().zip(&noise.eta).map(|(v, eta)| model.h(v) + eta).collect();
        let (_, c_emp) = mean_cov_of(&vbar);
        let z = (c_emp - &reference.predicted_cov[j]).norm();
        let innovation_pow_mean = pow_means(ybar.iter().map(|y| (y_obs - y).norm()), n);
        let a = &reference.gains[j];
        ubar = vbar.into_iter().zip(&ybar).map(|(v, y)| v + a * (y_obs - y)).collect();

        stats.push(CouplingStats {
            abs_pow_mean: pow_means(u.iter().zip(&ubar).map(|(a, b)| (a - b).norm()), n),
            z,
            innovation_pow_mean,
        });
        interacting.push(u.clone());
        replicas.push(ubar.clone());
    }
    Ok(CoupledRun {
        interacting,
        replicas,
        stats,
    })
}

/// Coupling diagnostics aggregated over independent replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct ChaosDiagnostics {
    pub n: usize,
    pub replicates: usize,
    /// `d[j][k]`: `(E|u_j - u_bar_j|^p)^{1/p}` with `p = MOMENT_ORDERS[k]`.
    pub d: Vec<[f64; 3]>,
    /// Replicate average of `Z_j`.
    pub z: Vec<f64>,
    /// `s[j][k]`: `(E|y_j - h(v_bar_j) - eta_j|^t)^{1/t}` with `t = MOMENT_ORDERS[k]`.
    pub s: Vec<[f64; 3]>,
}

pub fn chaos_diagnostics(
    model: &Model,
    data: &DataRecord,
    n: usize,
    replicates: usize,
    seed: u64,
    reference: &MeanFieldReference,
) -> Result<ChaosDiagnostics> {
    if replicates == 0 {
        return Err(Error::Usage("need at least one replicate".into()));
    }
    let runs: Vec<Vec<CouplingStats>> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| coupled_run(model, data, n, seed, r, reference).map(|c| c.stats))
        .collect::<Result<_>>()?;
    let steps = data.steps() + 1;
    let mut d = vec![[0.0; 3]; steps];
    let mut z = vec![0.0; steps];
    let mut s = vec![[0.0; 3]; steps];
    for run in &runs {
        for (j, st) in run.iter().enumerate() {
            for k in 0..3 {
                d[j][k] += st.abs_pow_mean[k];
                s[j][k] += st.innovation_pow_mean[k];
            }
            z[j] += st.z;
        }
    }
    let r = replicates as f64;
    let root = |acc: [f64; 3]| {
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = (acc[k] / r).powf(1.0 / MOMENT_ORDERS[k] as f64);
        }
        out
    };
    Ok(ChaosDiagnostics {
        n,
        replicates,
        d: d.into_iter().map(root).collect(),
        z: z.into_iter().map(|x| x / r).collect(),
        s: s.into_iter().map(root).collect(),
    })
}

/// What the ensemble averages are compared with.
#[derive(Debug, Clone, PartialEq)]
pub enum RateReference {
    /// The Kalman recursion (affine models).
    Kalman,
    /// The mean-field filter; the grid is used when the model is not affine.
    MeanField(Option<GridPolicy>),
    /// The true filter on a grid.
    TrueFilter(GridPolicy),
}

/// `reference[phi]` at the final step.
pub fn reference_values(
    model: &Model,
    data: &DataRecord,
    reference: &RateReference,
    observables: &[Observable],
) -> Result<Vec<f64>> {
    use crate::measures::Measure;
    let j = data.steps();
    match reference {
        RateReference::Kalman => {
            let k = kalman_exact(model, data)?;
            observables.iter().map(|phi| k[j].expect(phi)).collect()
        }
        RateReference::MeanField(grid) => {
            let run = mf_run(model, data, grid.as_ref())?;
            match (run.measures.as_gaussian(), run.measures.as_grid()) {
                (Some(g), _) => observables.iter().map(|phi| g[j].expect(phi)).collect(),
                (_, Some(g)) => observables.iter().map(|phi| g[j].expect(phi)).collect(),
                _ => unreachable!("a run is either Gaussian or grid"),
            }
        }
        RateReference::TrueFilter(policy) => {
            let run = filter_run(model, data, policy)?;
            observables.iter().map(|phi| run.measures[j].expect(phi)).collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RateSettings {
    pub n_list: Vec<usize>,
    pub replicates: usize,
    pub observables: Vec<Observable>,
    pub seed: u64,
    pub bootstrap_resamples: usize,
}

#[derive(Debug, Clone)]
pub struct ObservableRate {
    pub observable: Observable,
    pub reference: f64,
    /// RMSE over replicates for each `N`.
    pub rmse: Vec<f64>,
    /// `None` when every error is exactly zero.
    pub fit: Option<RateFit>,
    pub bootstrap: Option<RateFit>,
}

#[derive(Debug, Clone)]
pub struct RateReport {
    pub n_list: Vec<usize>,
    pub replicates: usize,
    pub rates: Vec<ObservableRate>,
    /// `values[n_index][replicate][phi_index]`: ensemble averages at the final step.
    pub values: Vec<Vec<Vec<f64>>>,
}

/// Replicate `r` at ensemble-size index `k` draws from stream `(seed, k << 32 | r)`.
pub fn rate_stream(seed: u64, n_index: usize, replicate: usize) -> NoiseStream {
    NoiseStream::new(seed, ((n_index as u64) << 32) | replicate as u64)
}

pub fn mc_rate_experiment(
    model: &Model,
    data: &DataRecord,
    settings: &RateSettings,
    reference: &RateReference,
) -> Result<RateReport> {
    if settings.n_list.len() < 3 {
        return Err(Error::Usage(format!(
            "a rate experiment needs at least 3 ensemble sizes, got {}",
            settings.n_list.len()
        )));
    }
    if settings.replicates == 0 || settings.observables.is_empty() {
        return Err(Error::Usage("need at least one replicate and one observable".into()));
    }
    let refs = reference_values(model, data, reference, &settings.observables)?;
    let cells: Vec<(usize, usize)> = (0..settings.n_list.len())
        .flat_map(|k| (0..settings.replicates).map(move |r| (k, r)))
        .collect();
    let flat: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|&(k, r)| {
            let particles = enkf_final(model, data, settings.n_list[k], rate_stream(settings.seed, k, r))?;
            let emp = EmpiricalMeasure::new(particles)?;
            Ok(settings
                .observables
                .iter()
                .map(|phi| emp.average(|u| phi.eval_vec(u)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let values: Vec<Vec<Vec<f64>>> = flat.chunks(settings.replicates).map(|c| c.to_vec()).collect();
    let xs: Vec<f64> = settings.n_list.iter().map(|&n| n as f64).collect();
    let mut rates = Vec::with_capacity(settings.observables.len());
    for (p, phi) in settings.observables.iter().enumerate() {
        let errors: Vec<Vec<f64>> = values
            .iter()
            .map(|reps| reps.iter().map(|v| v[p] - refs[p]).collect())
            .collect();
        let rm: Vec<f64> = errors.iter().map(|e| rmse(e)).collect();
        let (fit, bootstrap) = if rm.iter().all(|&x| x == 0.0) {
            (None, None)
        } else {
            let stream = NoiseStream::new(settings.seed, u64::MAX - p as u64);
            (
                Some(fit_rate(&xs, &rm)?),
                Some(fit_rate_bootstrap(&xs, &errors, settings.bootstrap_resamples, stream)?),
            )
        };
        rates.push(ObservableRate {
            observable: *phi,
            reference: refs[p],
            rmse: rm,
            fit,
            bootstrap,
        });
    }
    Ok(RateReport {
        n_list: settings.n_list.clone(),
        replicates: settings.replicates,
        rates,
        values,
    })
}

//! One recipe per experiment kind. Every recipe is a pure function of the config, so reruns
//! produce identical tables regardless of the thread count.

use enkf_core::bounds::{run_suites, transport_stability_suite, SuiteTolerances};
use enkf_core::meanfield::{equivalence_trials, mf_run, mf_run_grid};
use enkf_core::measures::{weighted_tv, GaussianMeasure, GridMeasure};
use enkf_core::model::{DataRecord, Model};
use enkf_core::particle::{chaos_diagnostics, mc_rate_experiment, MeanFieldReference, RateReference, RateSettings, MOMENT_ORDERS};
use enkf_core::rate::{fit_rate, RateFit};
use enkf_core::truefilter::{filter_run, kalman_exact, GridPolicy};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{ExperimentConfig, ExperimentKind, ReferenceKind};
use crate::error::{LabError, Result};
use crate::report::{Cell, Check, Report, Table};

const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 200;
const DEFAULT_TAIL_POINTS: usize = 3;

/// Run the recipe named by `cfg.kind`. The config must already be validated.
pub fn execute(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.kind {
        ExperimentKind::Exactness => exactness(cfg),
        ExperimentKind::McRate => mc_rate(cfg),
        ExperimentKind::EpsScaling => eps_scaling(cfg),
        ExperimentKind::Chaos => chaos(cfg),
        ExperimentKind::LipschitzSuite => lipschitz_suite(cfg),
        ExperimentKind::DgConvergence => dg_convergence(cfg),
    }
}

fn tol(value: Option<f64>, field: &str) -> Result<f64> {
    value.ok_or_else(|| LabError::Invalid {
        field: format!("tolerances.{field}"),
        message: "missing".into(),
    })
}

fn field<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| LabError::Invalid {
        field: name.to_string(),
        message: "missing".into(),
    })
}

/// Largest entrywise gap in mean and covariance.
fn moment_gap(m: &DVector<f64>, c: &DMatrix<f64>, exact: &GaussianMeasure) -> (f64, f64) {
    ((m - exact.mean()).amax(), (c - exact.cov()).amax())
}

fn fit_json(fit: &RateFit) -> serde_json::Value {
    json!({ "slope": fit.slope, "intercept": fit.intercept, "ci": [fit.ci.0, fit.ci.1] })
}

fn exactness(cfg: &ExperimentConfig) -> Result<Report> {
    let mut report = Report::new();
    if cfg.model.is_some() {
        let model = cfg.model()?;
        let data = cfg.data(&model)?;
        let kf = kalman_exact(&model, &data)?;
        let mf = mf_run(&model, &data, None)?;
        let mut table = Table::new("mean_field_vs_kalman", &["step", "mean_error", "cov_error"]);
        let mut worst: f64 = 0.0;
        for (j, k) in kf.iter().enumerate() {
            let (m, c) = mf.measures.mean_cov(j);
            let (em, ec) = moment_gap(&m, &c, k);
            worst = worst.max(em).max(ec);
            table.push(vec![j.into(), em.into(), ec.into()]);
        }
        report.tables.push(table);
        report.checks.push(Check::at_most(
            "mean-field vs Kalman max abs error",
            worst,
            tol(cfg.tolerances.max_abs_error, "max_abs_error")?,
        ));

        if let Some(grid) = &cfg.grid {
            let mut ladder = cfg.refinement.clone().unwrap_or_default();
            if !ladder.contains(&grid.cells) {
                ladder.push(grid.cells);
                ladder.sort_unstable();
            }
            let runs: Vec<Vec<(f64, f64)>> = ladder
                .par_iter()
                .map(|&cells| {
                    let run = filter_run(&model, &data, &grid.policy_with(model.dim_u(), cells)?)?;
                    Ok(run
                        .measures
                        .iter()
                        .zip(&kf)
                        .map(|(g, k)| {
                            let (m, c) = g.mean_cov();
                            moment_gap(&m, &c, k)
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            let mut table = Table::new("grid_vs_kalman", &["cells", "step", "mean_error", "cov_error"]);
            let mut max_err = Vec::with_capacity(ladder.len());
            for (&cells, errs) in ladder.iter().zip(&runs) {
                for (j, (em, ec)) in errs.iter().enumerate() {
                    table.push(vec![cells.into(), j.into(), (*em).into(), (*ec).into()]);
                }
                max_err.push(errs.iter().fold(0.0f64, |a, (em, ec)| a.max(*em).max(*ec)));
            }
            report.tables.push(table);
            let main = ladder.iter().position(|&c| c == grid.cells).expect("grid cells are on the ladder");
            report.checks.push(Check::at_most(
                format!("grid filter ({} cells) vs Kalman max abs error", grid.cells),
                max_err[main],
                tol(cfg.tolerances.grid_max_abs_error, "grid_max_abs_error")?,
            ));
            report.metric("refinement_cells", &ladder);
            report.metric("refinement_max_error", &max_err);
            if cfg.refinement.is_some() {
                let factor = tol(cfg.tolerances.refinement_factor, "refinement_factor")?;
                let floor = cfg.tolerances.refinement_floor.unwrap_or(0.0);
                let mut skipped = Vec::new();
                for k in 0..ladder.len() - 1 {
                    if max_err[k] <= floor {
                        skipped.push(ladder[k]);
                        continue;
                    }
                    report.checks.push(Check::at_least(
                        format!("refinement {} -> {} error reduction", ladder[k], ladder[k + 1]),
                        max_err[k] / max_err[k + 1],
                        factor,
                    ));
                }
                report.metric("refinement_pairs_at_round_off", &skipped);
            }
        }
    }

    if let Some(trials) = cfg.trials {
        let [du, dy] = cfg.joint_dims.unwrap_or([2, 1]);
        let results = equivalence_trials(cfg.seed, trials, du, dy)?;
        let mut table = Table::new("conditioning_identity", &["trial", "mean_discrepancy", "cov_discrepancy"]);
        let mut worst: f64 = 0.0;
        for (k, t) in results.iter().enumerate() {
            worst = worst.max(t.report.max());
            table.push(vec![k.into(), t.report.mean_discrepancy.into(), t.report.cov_discrepancy.into()]);
        }
        report.tables.push(table);
        report.checks.push(Check::at_most(
            format!("conditioning vs transport over {trials} random joints"),
            worst,
            tol(cfg.tolerances.equivalence, "equivalence")?,
        ));
    }
    Ok(report)
}

fn grid_policy(cfg: &ExperimentConfig, model: &Model) -> Result<GridPolicy> {
    field(&cfg.grid, "grid")?.policy(model.dim_u())
}

fn rate_reference(cfg: &ExperimentConfig, model: &Model) -> Result<RateReference> {
    Ok(match field(&cfg.reference, "reference")? {
        ReferenceKind::Kalman => RateReference::Kalman,
        ReferenceKind::MeanField if model.is_affine() => RateReference::MeanField(None),
        ReferenceKind::MeanField => RateReference::MeanField(Some(grid_policy(cfg, model)?)),
        ReferenceKind::TrueFilter => RateReference::TrueFilter(grid_policy(cfg, model)?),
    })
}

fn mc_rate(cfg: &ExperimentConfig) -> Result<Report> {
    let base = cfg.model()?;
    let data = cfg.data(&base)?;
    let settings = RateSettings {
        n_list: field(&cfg.n_list, "n_list")?.clone(),
        replicates: *field(&cfg.replicates, "replicates")?,
        observables: cfg.observables()?,
        seed: cfg.seed,
        bootstrap_resamples: cfg.bootstrap_resamples.unwrap_or(DEFAULT_BOOTSTRAP_RESAMPLES),
    };
    let eps: Vec<Option<f64>> = match &cfg.eps_list {
        Some(l) => l.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let combined = cfg.eps_list.is_some();
    let prefix: &[&str] = if combined { &["eps"] } else { &[] };
    let header = |cols: &[&'static str]| -> Vec<&'static str> { prefix.iter().chain(cols).copied().collect() };
    let mut runs = Table::new("runs", &header(&["replicate", "step", "n", "phi", "value"]));
    let mut rmse = Table::new("rmse", &header(&["n", "phi", "reference", "rmse"]));
    let lead = |e: Option<f64>| -> Vec<Cell> { e.map(Cell::from).into_iter().collect() };

    let mut report = Report::new();
    let mut fits = Vec::new();
    // curves[p][e]: RMSE against N for observable p at eps index e.
    let mut curves: Vec<Vec<Vec<f64>>> = vec![Vec::new(); settings.observables.len()];
    for &e in &eps {
        let model = match e {
            Some(e) => cfg.model_at(e)?,
            None => base.clone(),
        };
        let rr = mc_rate_experiment(&model, &data, &settings, &rate_reference(cfg, &model)?)?;
        for (k, &n) in rr.n_list.iter().enumerate() {
            for (r, vals) in rr.values[k].iter().enumerate() {
                for (phi, v) in settings.observables.iter().zip(vals) {
                    let mut row = lead(e);
                    row.extend([r.into(), data.steps().into(), n.into(), phi.to_string().into(), (*v).into()]);
                    runs.push(row);
                }
            }
        }
        for (p, rate) in rr.rates.iter().enumerate() {
            let id = rate.observable.to_string();
            for (k, &n) in rr.n_list.iter().enumerate() {
                let mut row = lead(e);
                row.extend([n.into(), id.clone().into(), rate.reference.into(), rate.rmse[k].into()]);
                rmse.push(row);
            }
            fits.push(json!({
                "eps": e,
                "phi": id,
                "reference": rate.reference,
                "fit": rate.fit.as_ref().map(fit_json),
                "bootstrap": rate.bootstrap.as_ref().map(fit_json),
            }));
            if !combined {
                match &rate.fit {
                    Some(fit) => report.checks.push(Check::within(
                        format!("RMSE slope for {id}"),
                        fit.slope,
                        tol(cfg.tolerances.slope_min, "slope_min")?,
                        tol(cfg.tolerances.slope_max, "slope_max")?,
                    )),
                    None => report.metric(&format!("exact_observable_{id}"), true),
                }
            }
            curves[p].push(rate.rmse.clone());
        }
    }
    report.tables.push(runs);
    report.tables.push(rmse);
    report.metric("fits", fits);

    if combined {
        let eps_list = field(&cfg.eps_list, "eps_list")?;
        let tail = cfg.tail_points.unwrap_or(DEFAULT_TAIL_POINTS);
        let xs: Vec<f64> = settings.n_list.iter().map(|&n| n as f64).collect();
        let m = xs.len();
        let decrease = tol(cfg.tolerances.decrease_slope_max, "decrease_slope_max")?;
        let plateau_min = tol(cfg.tolerances.plateau_slope_min, "plateau_slope_min")?;
        let mut plateaus = Vec::new();
        for (p, phi) in settings.observables.iter().enumerate() {
            let mut levels = Vec::with_capacity(eps_list.len());
            for (e, &eps) in eps_list.iter().enumerate() {
                let ys = &curves[p][e];
                levels.push(ys[m - tail..].iter().sum::<f64>() / tail as f64);
                if cfg.shape_eps.as_ref().is_some_and(|s| !s.contains(&eps)) {
                    continue;
                }
                let head = fit_rate(&xs[..tail], &ys[..tail])?;
                let end = fit_rate(&xs[m - tail..], &ys[m - tail..])?;
                report.checks.push(Check::at_most(
                    format!("{phi} at eps {eps}: slope over the {tail} smallest N"),
                    head.slope,
                    decrease,
                ));
                report.checks.push(Check::at_least(
                    format!("{phi} at eps {eps}: slope over the {tail} largest N"),
                    end.slope,
                    plateau_min,
                ));
            }
            let min_ratio = levels.windows(2).map(|w| w[1] / w[0]).fold(f64::INFINITY, f64::min);
            report.checks.push(Check::greater(
                format!("{phi}: plateau RMSE ratio between consecutive eps"),
                min_ratio,
                1.0,
            ));
            plateaus.push(json!({ "phi": phi.to_string(), "eps": eps_list, "plateau_rmse": levels }));
        }
        report.metric("plateaus", plateaus);
    }
    Ok(report)
}

/// `d_g` between the grid mean-field and grid true filters at every step.
fn filter_gap(model: &Model, data: &DataRecord, policy: &GridPolicy) -> Result<Vec<f64>> {
    let tf = filter_run(model, data, policy)?;
    let mf = mf_run_grid(model, data, policy)?;
    let grids: &[GridMeasure] = mf.measures.as_grid().expect("grid path");
    grids
        .iter()
        .zip(&tf.measures)
        .map(|(a, b)| Ok(weighted_tv(a, b)?))
        .collect()
}

fn eps_scaling(cfg: &ExperimentConfig) -> Result<Report> {
    let base = cfg.model()?;
    let data = cfg.data(&base)?;
    let policy = grid_policy(cfg, &base)?;
    let eps = field(&cfg.eps_list, "eps_list")?;
    let gaps: Vec<Vec<f64>> = eps
        .par_iter()
        .map(|&e| filter_gap(&cfg.model_at(e)?, &data, &policy))
        .collect::<Result<_>>()?;
    let mut table = Table::new("dg", &["eps", "step", "dg"]);
    for (&e, g) in eps.iter().zip(&gaps) {
        for (j, d) in g.iter().enumerate() {
            table.push(vec![e.into(), j.into(), (*d).into()]);
        }
    }
    let finals: Vec<f64> = gaps.iter().map(|g| *g.last().expect("step 0 is present")).collect();
    let fit = fit_rate(eps, &finals)?;
    let mut report = Report::new();
    report.tables.push(table);
    report.checks.push(Check::within(
        format!("log-log slope of d_g at step {}", data.steps()),
        fit.slope,
        tol(cfg.tolerances.slope_min, "slope_min")?,
        tol(cfg.tolerances.slope_max, "slope_max")?,
    ));
    let min_ratio = finals.windows(2).map(|w| w[1] / w[0]).fold(f64::INFINITY, f64::min);
    report.checks.push(Check::greater("d_g ratio between consecutive eps", min_ratio, 1.0));
    report.metric("fit", fit_json(&fit));
    report.metric("final_dg", &finals);
    Ok(report)
}

fn chaos(cfg: &ExperimentConfig) -> Result<Report> {
    let model = cfg.model()?;
    let data = cfg.data(&model)?;
    let grid = if model.is_affine() { None } else { Some(grid_policy(cfg, &model)?) };
    let reference = MeanFieldReference::compute(&model, &data, grid.as_ref())?;
    let n_list = field(&cfg.n_list, "n_list")?;
    let replicates = *field(&cfg.replicates, "replicates")?;
    let diags = n_list
        .iter()
        .map(|&n| chaos_diagnostics(&model, &data, n, replicates, cfg.seed, &reference))
        .collect::<enkf_core::Result<Vec<_>>>()?;

    let mut d_table = Table::new("discrepancy", &["n", "step", "p", "d"]);
    let mut z_table = Table::new("covariance_mismatch", &["n", "step", "z"]);
    let mut s_table = Table::new("innovation_mismatch", &["n", "step", "t", "s"]);
    for d in &diags {
        for j in 0..d.d.len() {
            for (k, &p) in MOMENT_ORDERS.iter().enumerate() {
                d_table.push(vec![d.n.into(), j.into(), (p as usize).into(), d.d[j][k].into()]);
                s_table.push(vec![d.n.into(), j.into(), (p as usize).into(), d.s[j][k].into()]);
            }
            z_table.push(vec![d.n.into(), j.into(), d.z[j].into()]);
        }
    }
    let mut report = Report::new();
    report.tables.extend([d_table, z_table, s_table]);

    let initial = diags.iter().flat_map(|d| d.d[0]).fold(0.0f64, f64::max);
    report.checks.push(Check::at_most("largest initial discrepancy", initial, 0.0));
    let p2 = MOMENT_ORDERS.iter().position(|&p| p == 2).expect("second moment is tracked");
    let scaled: Vec<f64> = diags.iter().map(|d| (d.n as f64).sqrt() * d.d.last().expect("steps")[p2]).collect();
    let (lo, hi) = scaled.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    report.checks.push(Check::at_most(
        format!("max/min of sqrt(N) D at step {} (p = 2)", data.steps()),
        hi / lo,
        tol(cfg.tolerances.ratio_max, "ratio_max")?,
    ));
    report.metric("scaled_discrepancy", &scaled);
    if n_list.len() >= 3 {
        let xs: Vec<f64> = n_list.iter().map(|&n| n as f64).collect();
        let z: Vec<f64> = diags.iter().map(|d| *d.z.last().expect("steps")).collect();
        if z.iter().all(|&v| v > 0.0) {
            let fit = fit_rate(&xs, &z)?;
            if let (Some(lo), Some(hi)) = (cfg.tolerances.slope_min, cfg.tolerances.slope_max) {
                report.checks.push(Check::within("covariance mismatch slope", fit.slope, lo, hi));
            }
            report.metric("covariance_mismatch_fit", fit_json(&fit));
        }
    }
    Ok(report)
}

fn lipschitz_suite(cfg: &ExperimentConfig) -> Result<Report> {
    let instances = *field(&cfg.instances, "instances")?;
    let tolerances = SuiteTolerances {
        slack: tol(cfg.tolerances.slack, "slack")?,
        slope_deviation: tol(cfg.tolerances.slope_deviation, "slope_deviation")?,
    };
    let suites = run_suites(cfg.seed, instances, &tolerances)?;
    let stability = transport_stability_suite(cfg.seed, instances)?;

    let mut report = Report::new();
    let mut table = Table::new("suites", &["suite", "instances", "checks", "violations", "max_excess"]);
    let mut slopes = Table::new("linearity_slopes", &["instance", "slope"]);
    for s in &suites {
        table.push(vec![
            s.name.clone().into(),
            s.instances.into(),
            s.checks.into(),
            s.violations.into(),
            s.max_excess.into(),
        ]);
        for (k, &slope) in s.slopes.iter().enumerate() {
            slopes.push(vec![k.into(), slope.into()]);
        }
        report.checks.push(Check::at_most(format!("{} violations", s.name), s.violations as f64, 0.0));
    }
    let mut st = Table::new("transport_stability", &["instance", "ratio"]);
    for (k, &r) in stability.iter().enumerate() {
        st.push(vec![k.into(), r.into()]);
    }
    report.tables.extend([table, slopes, st]);
    report.metric("transport_stability_max", stability.iter().copied().fold(0.0f64, f64::max));
    Ok(report)
}

fn dg_convergence(cfg: &ExperimentConfig) -> Result<Report> {
    let model = cfg.model()?;
    let data = cfg.data(&model)?;
    let grid = field(&cfg.grid, "grid")?;
    let ladder = field(&cfg.refinement, "refinement")?;
    let gaps: Vec<Vec<f64>> = ladder
        .par_iter()
        .map(|&cells| filter_gap(&model, &data, &grid.policy_with(model.dim_u(), cells)?))
        .collect::<Result<_>>()?;
    let mut table = Table::new("dg", &["cells", "step", "dg"]);
    for (&cells, g) in ladder.iter().zip(&gaps) {
        for (j, d) in g.iter().enumerate() {
            table.push(vec![cells.into(), j.into(), (*d).into()]);
        }
    }
    let finals: Vec<f64> = gaps.iter().map(|g| *g.last().expect("step 0 is present")).collect();
    let diffs: Vec<f64> = finals.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let mut report = Report::new();
    report.tables.push(table);
    let ratio_max = tol(cfg.tolerances.ratio_max, "ratio_max")?;
    for k in 0..diffs.len() - 1 {
        report.checks.push(Check::at_most(
            format!("successive difference ratio at {} cells", ladder[k + 2]),
            diffs[k + 1] / diffs[k],
            ratio_max,
        ));
    }
    report.metric("final_dg", &finals);
    report.metric("successive_differences", &diffs);
    Ok(report)
}

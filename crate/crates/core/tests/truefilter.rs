use enkf_core::bounds::{
    filter_moment_checks, lift_bounds, lift_lipschitz, perturbation_scaling, prediction_bounds, prediction_lipschitz,
    InstanceSampler, PERTURBATION_AMPLITUDES,
};
use enkf_core::measures::{GaussianMeasure, GridAxis, GridMeasure};
use enkf_core::model::{simulate_truth, DataRecord, Model, ModelSpec, Perturbation, VectorFieldSpec};
use enkf_core::truefilter::{
    analysis_fused, condition, default_y_axes, filter_run, kalman_exact, kalman_update, lift_grid, predict_grid,
    GridPolicy,
};
use nalgebra::{DMatrix, DVector};

fn scalar(m: f64, h: f64, sigma: f64, gamma: f64, m0: f64, c0: f64) -> Model {
    Model::new(ModelSpec::scalar_affine(m, 0.0, h, 0.0, sigma, gamma, m0, c0)).unwrap()
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<GridAxis> {
    vec![GridAxis::new(lo, hi, n).unwrap()]
}

fn render(m: f64, v: f64, axes: Vec<GridAxis>) -> GridMeasure {
    GridMeasure::from_gaussian(&GaussianMeasure::scalar(m, v).unwrap(), axes).unwrap()
}

fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

fn sup_diff(a: &GridMeasure, b: &GridMeasure) -> f64 {
    a.density().iter().zip(b.density()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_dynamics_predicts_the_noise_law() {
    let model = scalar(0.0, 1.0, 0.7, 1.0, 0.0, 1.0);
    let ax = axis(-10.0, 10.0, 801);
    let mu = render(2.0, 0.5, ax.clone());
    let (p, pre) = predict_grid(&mu, &model, &ax).unwrap();
    assert!(sup_diff(&p, &render(0.0, 0.7, ax)) < 1e-8);
    assert!((pre - 1.0).abs() < 1e-6);
}

#[test]
fn identity_dynamics_convolves() {
    let model = scalar(1.0, 1.0, 1.0, 1.0, 0.0, 1.0);
    let ax = axis(-14.0, 14.0, 1 << 11);
    let (p, pre) = predict_grid(&render(0.0, 1.0, ax.clone()), &model, &ax).unwrap();
    assert!(sup_diff(&p, &render(0.0, 2.0, ax)) < 1e-8);
    assert!((pre - 1.0).abs() < 1e-6);
}

#[test]
fn lift_marginals_and_blocks() {
    let model = scalar(1.0, 1.0, 1.0, 1.0, 0.0, 1.0);
    let ax = axis(-10.0, 10.0, 400);
    let nu = render(0.5, 1.0, ax);
    let y_axes = default_y_axes(&nu, &model, 800).unwrap();
    let (pi, pre) = lift_grid(&nu, &model, &y_axes).unwrap();
    assert!((pre - 1.0).abs() < 1e-6);
    let back = pi.marginal(&[0]).unwrap();
    assert!(sup_diff(&back, &nu) < 1e-8);
    let (m, c) = pi.mean_cov();
    let nu_h = nu.mean_cov().0[0];
    assert!((m[1] - nu_h).abs() < 1e-8);
    assert!((c[(1, 1)] - 2.0).abs() < 1e-6);
}

#[test]
fn conditioning_a_product_returns_the_factor() {
    let axes = vec![GridAxis::new(-8.0, 8.0, 200).unwrap(), GridAxis::new(-8.0, 8.0, 160).unwrap()];
    let pi = GridMeasure::from_fn(axes.clone(), |x| normal_pdf(x[0], 1.0, 0.8) * normal_pdf(x[1], -1.0, 2.0)).unwrap();
    let nu = render(1.0, 0.8, vec![axes[0]]);
    for y in [-3.3, 0.0, 2.71] {
        let (c, _) = condition(&pi, 1, &DVector::from_element(1, y)).unwrap();
        assert!(sup_diff(&c, &nu) < 1e-10);
    }
}

#[test]
fn conditioning_ignores_observation_only_reweighting() {
    let axes = vec![GridAxis::new(-12.0, 12.0, 300).unwrap(), GridAxis::new(-12.025, 12.025, 481).unwrap()];
    let joint = |x: &[f64]| {
        let (u, y) = (x[0], x[1]);
        (-(u * u - u * y + y * y) / 3.0).exp()
    };
    let pi = GridMeasure::from_fn(axes.clone(), joint).unwrap();
    let y = DVector::from_element(1, 1.0);
    let (c1, _) = condition(&pi, 1, &y).unwrap();
    let (m, v) = c1.mean_cov();
    assert!((m[0] - 0.5).abs() < 1e-6 && (v[(0, 0)] - 1.5).abs() < 1e-6);
    let reweighted = GridMeasure::from_fn(axes.clone(), |x| joint(x) * (1.0 + x[1] * x[1])).unwrap();
    let (c2, _) = condition(&reweighted, 1, &y).unwrap();
    assert!(sup_diff(&c1, &c2) < 1e-12);
    let product = GridMeasure::from_fn(axes, |x| {
        c1.density()[((x[0] + 12.0) / (24.0 / 300.0)).floor() as usize] * normal_pdf(x[1], 0.0, 1.0)
    })
    .unwrap();
    let (c3, _) = condition(&product, 1, &y).unwrap();
    assert!(sup_diff(&c1, &c3) < 1e-12);
}

#[test]
fn flat_likelihood_leaves_the_forecast() {
    let model = scalar(0.9, 1.0, 0.5, 1e6, 0.0, 1.0);
    let nu = render(0.3, 1.2, axis(-12.0, 12.0, 1024));
    let (a, _) = analysis_fused(&nu, &DVector::from_element(1, 2.0), &model).unwrap();
    assert!(sup_diff(&a, &nu) < 1e-6);
}

#[test]
fn one_step_matches_kalman() {
    let model = scalar(1.0, 1.0, 1.0, 1.0, 0.0, 1.0);
    let data = DataRecord::from_observations(1, vec![DVector::from_element(1, 1.0)]).unwrap();
    let run = filter_run(&model, &data, &GridPolicy::uniform(1, -12.0, 12.0, 1 << 12).unwrap()).unwrap();
    let (m, c) = run.measures[1].mean_cov();
    assert!((m[0] - 2.0 / 3.0).abs() < 1e-5);
    assert!((c[(0, 0)] - 2.0 / 3.0).abs() < 1e-5);
}

#[test]
fn fused_and_composed_analysis_agree_to_interpolation_order() {
    let model = scalar(0.9, 1.0, 0.5, 0.5, 0.0, 1.0);
    let nu = render(0.2, 1.3, axis(-12.0, 12.0, 1024));
    let y = DVector::from_element(1, 0.77);
    let (fused, _) = analysis_fused(&nu, &y, &model).unwrap();
    let fm = fused.mean_cov();
    for cells in [200usize, 400, 800] {
        let y_axes = default_y_axes(&nu, &model, cells).unwrap();
        let (pi, _) = lift_grid(&nu, &model, &y_axes).unwrap();
        let (composed, _) = condition(&pi, 1, &y).unwrap();
        let cm = composed.mean_cov();
        let gap = (cm.0[0] - fm.0[0]).abs().max((cm.1[(0, 0)] - fm.1[(0, 0)]).abs());
        let dy = y_axes[0].spacing();
        assert!(gap <= 2.0 * dy * dy, "gap {gap} at spacing {dy}");
    }
}

#[test]
fn filter_tracks_kalman_over_ten_steps() {
    let model = scalar(0.9, 1.0, 0.5, 0.5, 0.0, 1.0);
    let data = simulate_truth(&model, 10, 7);
    let run = filter_run(&model, &data, &GridPolicy::uniform(1, -12.0, 12.0, 1 << 12).unwrap()).unwrap();
    let kf = kalman_exact(&model, &data).unwrap();
    assert_eq!(run.measures.len(), 11);
    for (g, k) in run.measures.iter().zip(&kf) {
        let (m, c) = g.mean_cov();
        assert!((m[0] - k.mean()[0]).abs() < 1e-5);
        assert!((c[(0, 0)] - k.cov()[(0, 0)]).abs() < 1e-5);
        assert!((g.mass() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn filter_moments_stay_below_the_iterated_bound() {
    let base = ModelSpec::scalar_affine(0.8, 0.0, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0);
    let dynamics =
        VectorFieldSpec::affine_plus_bounded(base.dynamics.matrix().clone(), base.dynamics.offset().clone(), 0.2, Perturbation::Sine)
            .unwrap();
    let model = Model::new(ModelSpec { dynamics, ..base }).unwrap();
    let data = simulate_truth(&model, 6, 3);
    let checks = filter_moment_checks(&model, &data, &GridPolicy::uniform(1, -12.0, 12.0, 1024).unwrap()).unwrap();
    assert_eq!(checks.len(), 24);
    for c in &checks {
        assert!(c.lhs.is_finite() && c.holds(1e-10), "{c:?}");
    }
}

#[test]
fn kalman_gain_limit_as_noise_vanishes() {
    let model = scalar(1.0, 1.0, 1.0, 1.0, 0.0, 1.0);
    let forecast = GaussianMeasure::scalar(0.0, 2.0).unwrap();
    let y = DVector::from_element(1, 1.5);
    let mut last = (f64::INFINITY, f64::INFINITY);
    for g in [1.0, 0.1, 0.01] {
        let spec = ModelSpec {
            gamma: DMatrix::from_element(1, 1, g),
            ..model.spec().clone()
        };
        let post = kalman_update(&Model::new(spec).unwrap(), &forecast, &y).unwrap();
        let (dm, v) = ((post.mean()[0] - 1.5).abs(), post.cov()[(0, 0)]);
        assert!(dm < last.0 && v < last.1);
        last = (dm, v);
    }
    assert!(last.0 < 0.01 && last.1 < 0.01);
}

#[test]
fn lemma_inequalities_on_sampled_instances() {
    let s = InstanceSampler::new(99);
    for k in 0..6 {
        let inst = s.instance(k).unwrap();
        let m = &inst.model;
        let mut checks = prediction_bounds(&inst.mu, m).unwrap();
        checks.extend(lift_bounds(&inst.mu, m, inst.y_cells).unwrap());
        checks.push(prediction_lipschitz(&inst.mu, &inst.nu, m).unwrap());
        checks.push(lift_lipschitz(&inst.mu, &inst.nu, m, inst.y_cells).unwrap());
        for c in &checks {
            assert!(c.holds(1e-10), "instance {k}: {c:?}");
        }
        let (d, slope) = perturbation_scaling(&inst.mu, m, Perturbation::Tanh, &PERTURBATION_AMPLITUDES).unwrap();
        assert!(d.iter().all(|x| *x > 0.0));
        assert!((slope - 1.0).abs() <= 0.15, "instance {k}: slope {slope}");
    }
}

#[test]
fn suites_report_every_family() {
    use enkf_core::bounds::{run_suites, SuiteTolerances};
    let reports = run_suites(4, 2, &SuiteTolerances::default()).unwrap();
    assert_eq!(reports.len(), 9);
    for r in &reports {
        assert_eq!(r.instances, 2);
        assert!(r.checks > 0 && r.passed(), "{r:?}");
    }
    assert_eq!(reports[8].slopes.len(), 2);
    let strict = SuiteTolerances { slope_deviation: 0.0, ..SuiteTolerances::default() };
    assert!(!run_suites(4, 2, &strict).unwrap()[8].passed());
}

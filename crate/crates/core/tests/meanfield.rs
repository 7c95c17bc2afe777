use enkf_core::bounds::{mean_field_moment_checks, transport_stability_suite};
use enkf_core::measures::{weighted_tv, GaussianMeasure, GridAxis, GridMeasure, JointMoments};
use enkf_core::meanfield::{
    equivalence_trials, gaussian_equivalence_check, kalman_gain, mf_run, mf_step_gaussian, mf_step_grid, pushforward_gaussian,
    transport, KalmanGain,
};
use enkf_core::model::{simulate_truth, DataRecord, Model, ModelSpec, Perturbation, VectorFieldSpec};
use enkf_core::truefilter::{filter_run, kalman_exact, predict_grid, GridPolicy};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(m: f64, h: f64, sigma: f64, gamma: f64) -> Model {
    Model::new(ModelSpec::scalar_affine(m, 0.0, h, 0.0, sigma, gamma, 0.0, 1.0)).unwrap()
}

fn scalar_joint(c_uu: f64, c_uy: f64, c_yy: f64) -> JointMoments {
    JointMoments {
        m_u: DVector::zeros(1),
        m_y: DVector::zeros(1),
        c_uu: DMatrix::from_element(1, 1, c_uu),
        c_uy: DMatrix::from_element(1, 1, c_uy),
        c_yy: DMatrix::from_element(1, 1, c_yy),
    }
}

#[test]
fn gain_examples() {
    assert_eq!(kalman_gain(&scalar_joint(1.0, 0.0, 2.0)).unwrap().matrix[(0, 0)], 0.0);
    let a = kalman_gain(&scalar_joint(2.0, 2.0, 3.0)).unwrap();
    assert!((a.matrix[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    assert!(a.residual() < 1e-10);
    // The forecast N(0, 2) observed with h = u and Gamma = 1 has exactly these blocks.
    let model = scalar(1.0, 1.0, 1.0, 1.0);
    let post = mf_step_gaussian(&GaussianMeasure::standard(1), &DVector::from_element(1, 1.0), &model).unwrap();
    assert!((post.mean()[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((post.cov()[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn zero_observation_matrix_returns_the_forecast() {
    let model = scalar(0.9, 0.0, 0.5, 0.5);
    let mu = GaussianMeasure::scalar(1.0, 2.0).unwrap();
    let post = mf_step_gaussian(&mu, &DVector::from_element(1, 3.0), &model).unwrap();
    assert!((post.mean()[0] - 0.9).abs() < 1e-15);
    assert!((post.cov()[(0, 0)] - (0.81 * 2.0 + 0.5)).abs() < 1e-15);

    let policy = GridPolicy::uniform(1, -12.0, 12.0, 512).unwrap();
    let g = GridMeasure::from_gaussian(&mu, policy.u_axes.clone()).unwrap();
    let (out, gain, diag) = mf_step_grid(&g, &DVector::from_element(1, 3.0), &model, &policy).unwrap();
    assert!(gain.matrix[(0, 0)].abs() < 1e-15);
    let (pred, _) = predict_grid(&g, &model, &policy.u_axes).unwrap();
    let sup = out.density().iter().zip(pred.density()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(sup < 1e-12, "{sup}");
    assert!(diag.mass_defect < 1e-6);
}

#[test]
fn affine_run_is_the_kalman_recursion() {
    let model = scalar(0.9, 1.0, 0.5, 0.5);
    let data = simulate_truth(&model, 10, 7);
    let run = mf_run(&model, &data, None).unwrap();
    let kf = kalman_exact(&model, &data).unwrap();
    for (j, k) in kf.iter().enumerate() {
        let (m, c) = run.measures.mean_cov(j);
        assert!((m[0] - k.mean()[0]).abs() <= 1e-12);
        assert!((c[(0, 0)] - k.cov()[(0, 0)]).abs() <= 1e-12);
    }
    let empty = mf_run(&model, &data.truncated(0), None).unwrap();
    assert_eq!(empty.measures.len(), 1);
    assert_eq!(&empty.measures.as_gaussian().unwrap()[0], model.mu0());
}

#[test]
fn grid_step_tracks_the_gaussian_step_under_refinement() {
    let model = scalar(0.9, 1.0, 0.5, 0.5);
    let mu = GaussianMeasure::scalar(0.3, 1.0).unwrap();
    let y = DVector::from_element(1, 0.8);
    let exact = mf_step_gaussian(&mu, &y, &model).unwrap();
    let errs: Vec<f64> = [128usize, 256, 512, 1024]
        .iter()
        .map(|&n| {
            let policy = GridPolicy::new(vec![GridAxis::new(-12.0, 12.0, n).unwrap()], 2 * n);
            let g = GridMeasure::from_gaussian(&mu, policy.u_axes.clone()).unwrap();
            let (out, _, diag) = mf_step_grid(&g, &y, &model, &policy).unwrap();
            assert!(diag.mass_defect < 1e-6);
            let (m, c) = out.mean_cov();
            (m[0] - exact.mean()[0]).abs().max((c[(0, 0)] - exact.cov()[(0, 0)]).abs())
        })
        .collect();
    assert!(errs[3] < 1e-4, "{errs:?}");
    for w in errs.windows(2) {
        assert!(w[1] <= 0.5 * w[0], "{errs:?}");
    }
}

#[test]
fn nonlinear_run_reports_finite_distance_to_the_filter() {
    let base = ModelSpec::scalar_affine(0.8, 0.0, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0);
    let dynamics = VectorFieldSpec::affine_plus_bounded(
        base.dynamics.matrix().clone(),
        base.dynamics.offset().clone(),
        0.1,
        Perturbation::Sine,
    )
    .unwrap();
    let model = Model::new(ModelSpec { dynamics, ..base }).unwrap();
    let data = simulate_truth(&model, 4, 11);
    let policy = GridPolicy::uniform(1, -12.0, 12.0, 512).unwrap();
    let mf = mf_run(&model, &data, Some(&policy)).unwrap();
    let tf = filter_run(&model, &data, &policy).unwrap();
    let grids = mf.measures.as_grid().unwrap();
    assert_eq!(mf.grid_diagnostics.len(), 4);
    for j in 1..=4 {
        let d = weighted_tv(&grids[j], &tf.measures[j]).unwrap();
        assert!(d.is_finite() && d > 0.0);
        let checks = mean_field_moment_checks(&grids[j - 1], data.observation(j - 1), &model, &policy).unwrap();
        assert!(checks.iter().all(|c| c.holds(1e-10)), "{checks:?}");
    }
    assert!(mf_run(&model, &data, None).is_err());
}

#[test]
fn transport_stability_ratio_is_finite() {
    let ratios = transport_stability_suite(5, 6).unwrap();
    assert!(ratios.iter().all(|r| r.is_finite() && *r > 0.0), "{ratios:?}");
}

/// Conditional law of `u` given `y` through the precision matrix, independent of any gain.
fn precision_conditional(mean: &DVector<f64>, cov: &DMatrix<f64>, du: usize, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let p = cov.clone().try_inverse().unwrap();
    let p_uu = p.view((0, 0), (du, du)).into_owned();
    let p_uy = p.view((0, du), (du, cov.nrows() - du)).into_owned();
    let c = p_uu.clone().try_inverse().unwrap();
    let m = mean.rows(0, du).into_owned() - &c * &p_uy * (y - mean.rows(du, cov.nrows() - du));
    (m, c)
}

#[test]
fn transport_equals_conditioning_on_random_gaussians() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let l = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let cov = &l * l.transpose() + DMatrix::identity(3, 3) * 0.1;
        let cov = (&cov + cov.transpose()) * 0.5;
        let mean = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
        let y = DVector::from_element(1, rng.random_range(-3.0..3.0));
        let pi = GaussianMeasure::new(mean.clone(), cov.clone()).unwrap();
        let report = gaussian_equivalence_check(&pi, 2, &y).unwrap();
        worst = worst.max(report.max());

        let joint = JointMoments::from_mean_cov(&mean, &cov, 2).unwrap();
        let gain: KalmanGain = kalman_gain(&joint).unwrap();
        let (pm, pc) = pushforward_gaussian(&joint, &gain, &y);
        let (om, oc) = precision_conditional(&mean, &cov, 2, &y);
        worst = worst.max((pm - om).amax()).max((pc - oc).amax());
    }
    assert!(worst <= 1e-8, "{worst}");
}

#[test]
fn uncorrelated_joint_leaves_the_state_marginal() {
    let mean = DVector::from_vec(vec![1.0, -1.0, 2.0]);
    let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0, 4.0]);
    let joint = JointMoments::from_mean_cov(&mean, &cov, 2).unwrap();
    let gain = kalman_gain(&joint).unwrap();
    let (m, c) = pushforward_gaussian(&joint, &gain, &DVector::from_element(1, 7.0));
    assert!((m - mean.rows(0, 2)).amax() < 1e-15);
    assert!((c - cov.view((0, 0), (2, 2))).amax() < 1e-15);
}

#[test]
fn singular_observation_covariance_is_refused() {
    assert!(kalman_gain(&scalar_joint(1.0, 0.0, 0.0)).is_err());
    let data = DataRecord::from_observations(1, vec![]).unwrap();
    assert_eq!(data.steps(), 0);
}

proptest! {
    #[test]
    fn transport_is_affine(
        u1 in -10.0f64..10.0, u2 in -10.0f64..10.0, y1 in -10.0f64..10.0, y2 in -10.0f64..10.0,
        a in -3.0f64..3.0, z in -10.0f64..10.0, alpha in 0.0f64..1.0,
    ) {
        let gain = kalman_gain(&scalar_joint(1.0, a, 1.0)).unwrap();
        let v = |x: f64| DVector::from_element(1, x);
        let mix = transport(&v(alpha * u1 + (1.0 - alpha) * u2), &v(alpha * y1 + (1.0 - alpha) * y2), &gain, &v(z));
        let sep = transport(&v(u1), &v(y1), &gain, &v(z)) * alpha + transport(&v(u2), &v(y2), &gain, &v(z)) * (1.0 - alpha);
        prop_assert!((mix - sep).amax() <= 1e-12 * (1.0 + a.abs()) * 40.0);
        prop_assert_eq!(transport(&v(u1), &v(z), &gain, &v(z)), v(u1));
    }
}

#[test]
fn seeded_equivalence_trials_are_reproducible() {
    let a = equivalence_trials(9, 50, 3, 2).unwrap();
    let b = equivalence_trials(9, 50, 3, 2).unwrap();
    assert_eq!(a.len(), 50);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.y_obs, y.y_obs);
        assert_eq!(x.joint, y.joint);
        assert!(x.report.max() <= 1e-8);
        assert_eq!(x.joint.dim(), 5);
    }
    assert!(equivalence_trials(9, 1, 0, 1).is_err());
}

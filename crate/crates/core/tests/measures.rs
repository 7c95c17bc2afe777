use enkf_core::bounds::{moment_difference_bounds, psd_gap_bounds};
use enkf_core::measures::{
    gaussian_projection, in_p_r, mean_cov, moment_q, weighted_tv, EmpiricalMeasure, GaussianMeasure, GridAxis,
    GridMeasure, Measure,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn normal_pdf(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

fn render(m: f64, v: f64, lo: f64, hi: f64, n: usize) -> GridMeasure {
    GridMeasure::from_gaussian(&GaussianMeasure::scalar(m, v).unwrap(), vec![GridAxis::new(lo, hi, n).unwrap()]).unwrap()
}

#[test]
fn gaussian_moments_are_exact() {
    assert!((moment_q(&GaussianMeasure::standard(2), 2).unwrap() - 2.0).abs() < 1e-14);
    assert!((moment_q(&GaussianMeasure::standard(1), 4).unwrap() - 3.0).abs() < 1e-14);
}

#[test]
fn grid_second_moment_matches_closed_form() {
    let g = render(0.0, 1.0, -10.0, 10.0, 1 << 12);
    assert!((moment_q(&g, 2).unwrap() - 1.0).abs() < 1e-8);
}

#[test]
fn grid_mean_cov_matches_closed_form() {
    let g = render(1.0, 2.0, -12.0, 14.0, 1 << 12);
    let (m, c) = mean_cov(&g).unwrap();
    assert!((m[0] - 1.0).abs() < 1e-8);
    assert!((c[(0, 0)] - 2.0).abs() < 1e-8);
}

#[test]
fn lift_of_standard_normal_has_affine_gaussian_blocks() {
    use enkf_core::measures::joint_blocks;
    let axes = vec![GridAxis::new(-10.0, 10.0, 400).unwrap(), GridAxis::new(-25.0, 25.0, 1000).unwrap()];
    let g = GridMeasure::from_fn(axes, |x| normal_pdf(x[0], 0.0, 1.0) * normal_pdf(x[1], 2.0 * x[0], 1.0)).unwrap();
    let jm = joint_blocks(&g, 1).unwrap();
    assert!((jm.c_uy[(0, 0)] - 2.0).abs() < 1e-6);
    assert!((jm.c_yy[(0, 0)] - 5.0).abs() < 1e-6);
}

#[test]
fn bimodal_projection_uses_mixture_moments() {
    let g = GridMeasure::from_fn(vec![GridAxis::new(-10.0, 10.0, 1 << 12).unwrap()], |x| {
        0.5 * normal_pdf(x[0], -2.0, 0.5) + 0.5 * normal_pdf(x[0], 2.0, 0.5)
    })
    .unwrap();
    let p = gaussian_projection(&g).unwrap();
    assert!(p.mean()[0].abs() < 1e-6);
    assert!((p.cov()[(0, 0)] - 4.5).abs() < 1e-6);
}

#[test]
fn weighted_tv_matches_adaptive_quadrature() {
    let (lo, hi) = (-12.0, 12.0);
    let a = render(0.0, 1.0, lo, hi, 1 << 13);
    let b = render(1.0, 1.0, lo, hi, 1 << 13);
    let f = |x: f64| (1.0 + x * x) * (normal_pdf(x, 0.0, 1.0) - normal_pdf(x, 1.0, 1.0)).abs();
    let oracle = adaptive_simpson(&f, lo, 0.5, 1e-13) + adaptive_simpson(&f, 0.5, hi, 1e-13);
    let dg = weighted_tv(&a, &b).unwrap();
    assert!((dg - oracle).abs() < 1e-6, "{dg} vs {oracle}");
}

#[test]
fn weighted_tv_grows_with_the_shift() {
    let a = render(0.0, 1.0, -12.0, 12.0, 1 << 12);
    let d: Vec<f64> = [0.1, 0.2, 0.4]
        .iter()
        .map(|&m| weighted_tv(&a, &render(m, 1.0, -12.0, 12.0, 1 << 12)).unwrap())
        .collect();
    assert!(d[0] < d[1] && d[1] < d[2]);
    assert_eq!(weighted_tv(&a, &a).unwrap(), 0.0);
}

#[test]
fn weighted_tv_self_convergence() {
    // The densities cross only at 0.5, which is a cell boundary at every resolution, so the
    // integrand is smooth within each cell.
    let (lo, hi) = (-11.5, 12.5);
    let f = |x: f64| (1.0 + x * x) * (normal_pdf(x, 0.0, 1.0) - normal_pdf(x, 1.0, 1.0)).abs();
    let oracle = adaptive_simpson(&f, lo, 0.5, 1e-14) + adaptive_simpson(&f, 0.5, hi, 1e-14);
    let errs: Vec<f64> = [64usize, 128, 256, 512]
        .iter()
        .map(|&n| (weighted_tv(&render(0.0, 1.0, lo, hi, n), &render(1.0, 1.0, lo, hi, n)).unwrap() - oracle).abs())
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= 0.5 * w[0], "{errs:?}");
    }
}

#[test]
fn weighted_tv_rejects_mismatched_axes() {
    let a = render(0.0, 1.0, -12.0, 12.0, 256);
    let b = render(0.0, 1.0, -12.0, 12.0, 512);
    assert!(weighted_tv(&a, &b).is_err());
}

#[test]
fn lift_radius_respects_lemma_bound() {
    use enkf_core::bounds::{lift_bounds, InstanceSampler};
    let s = InstanceSampler::new(17);
    for k in [0, 2, 4] {
        let inst = s.instance(k).unwrap();
        let checks = lift_bounds(&inst.mu, &inst.model, inst.y_cells).unwrap();
        let r = checks.iter().find(|c| c.name == "lift radius").unwrap();
        assert!(r.lhs.is_finite() && r.lhs >= 1.0 && r.holds(1e-10), "{r:?}");
    }
}

#[test]
fn radius_examples() {
    let g = GaussianMeasure::new(DVector::zeros(2), DMatrix::identity(2, 2) * 4.0).unwrap();
    assert!(!in_p_r(&g, 1.0).unwrap());
    assert!(in_p_r(&g, 2.0).unwrap());
    assert!(in_p_r(&GaussianMeasure::standard(2), 1.0).unwrap());
    assert!(in_p_r(&g, 0.5).is_err());
}

fn density_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

fn grid_from(mut d: Vec<f64>, axis: GridAxis) -> GridMeasure {
    d[0] += 1e-3;
    let mut g = GridMeasure::new(vec![axis], d).unwrap();
    g.normalize().unwrap();
    g
}

fn points_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..4).prop_flat_map(|d| {
        (
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), 1..60),
            prop::collection::vec(-10.0f64..10.0, d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weighted_tv_is_a_metric(a in density_strategy(40), b in density_strategy(40), c in density_strategy(40)) {
        let axis = GridAxis::new(-4.0, 4.0, 40).unwrap();
        let (a, b, c) = (grid_from(a, axis), grid_from(b, axis), grid_from(c, axis));
        let ab = weighted_tv(&a, &b).unwrap();
        prop_assert_eq!(ab, weighted_tv(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= weighted_tv(&a, &c).unwrap() + weighted_tv(&c, &b).unwrap() + 1e-10);
    }

    #[test]
    fn moment_differences_are_controlled_by_weighted_tv(a in density_strategy(40), b in density_strategy(40)) {
        let axis = GridAxis::new(-4.0, 4.0, 40).unwrap();
        let (a, b) = (grid_from(a, axis), grid_from(b, axis));
        let dg = weighted_tv(&a, &b).unwrap();
        for c in moment_difference_bounds(&a, &b, dg).unwrap() {
            prop_assert!(c.holds(1e-10), "{:?}", c);
        }
    }

    #[test]
    fn second_moment_about_a_point_dominates_covariance((pts, a) in points_strategy()) {
        let e = EmpiricalMeasure::new(pts.into_iter().map(DVector::from_vec).collect()).unwrap();
        let checks = psd_gap_bounds(&e, &DVector::from_vec(a));
        prop_assert!(checks[0].holds(1e-12), "{:?}", checks[0]);
        prop_assert!(checks[1].holds(1e-12), "{:?}", checks[1]);
    }

    #[test]
    fn projection_preserves_first_two_moments((pts, _) in points_strategy()) {
        let e = EmpiricalMeasure::new(pts.into_iter().map(DVector::from_vec).collect()).unwrap();
        let (m, c) = e.mean_cov();
        prop_assume!(enkf_core::linalg::min_eigenvalue(&c) > 1e-6);
        let g = gaussian_projection(&e).unwrap();
        let (gm, gc) = Measure::mean_cov(&g).unwrap();
        prop_assert!((gm - m).amax() <= 1e-12 * (1.0 + gc.amax()));
        prop_assert!((gc - c).amax() <= 1e-12 * (1.0 + e.mean_cov().1.amax()));
    }
}

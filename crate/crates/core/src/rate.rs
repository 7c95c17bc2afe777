//! Log-log rate fits for convergence experiments.

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::rng::{NoiseRole, NoiseStream};

/// Least-squares fit of `log y = intercept + slope * log x` with a 95% interval for the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci: (f64, f64),
}

impl RateFit {
    pub fn ci_width(&self) -> f64 {
        self.ci.1 - self.ci.0
    }
}

fn check_positive(name: &str, v: &[f64]) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(Error::Usage(format!("{name} must be positive and finite, found {x}")));
    }
    Ok(())
}

fn least_squares(lx: &[f64], ly: &[f64]) -> (f64, f64, f64) {
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx
        .iter()
        .zip(ly)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    (slope, intercept, se)
}

/// Fit with a Student-t interval from the regression standard error.
pub fn fit_rate(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::Usage(format!("a rate fit needs at least 3 points, got {}", xs.len())));
    }
    check_positive("x", xs)?;
    check_positive("y", ys)?;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    if lx.iter().all(|x| *x == lx[0]) {
        return Err(Error::Usage("a rate fit needs at least two distinct x values".into()));
    }
    let (slope, intercept, se) = least_squares(&lx, &ly);
    let t = StudentsT::new(0.0, 1.0, (xs.len() - 2) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Ok(RateFit {
        slope,
        intercept,
        ci: (slope - t * se, slope + t * se),
    })
}

/// Root-mean-square of replicate errors.
pub fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

/// Fit the RMSE of replicate-level errors against `xs`, with a percentile bootstrap interval
/// obtained by resampling replicates independently at every `x`.
pub fn fit_rate_bootstrap(
    xs: &[f64],
    errors: &[Vec<f64>],
    resamples: usize,
    stream: NoiseStream,
) -> Result<RateFit> {
    if errors.len() != xs.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            actual: errors.len(),
        });
    }
    if errors.iter().any(|e| e.is_empty()) {
        return Err(Error::Usage("every x needs at least one replicate".into()));
    }
    if resamples < 2 {
        return Err(Error::Usage("bootstrap needs at least 2 resamples".into()));
    }
    let ys: Vec<f64> = errors.iter().map(|e| rmse(e)).collect();
    let point = fit_rate(xs, &ys)?;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let mut slopes = Vec::with_capacity(resamples);
    for b in 0..resamples {
        let mut rng = stream.rng(b as u64, 0, NoiseRole::Bootstrap);
        let ly: Vec<f64> = errors
            .iter()
            .map(|e| {
                let ss: f64 = (0..e.len())
                    .map(|_| {
                        let x = e[rng.random_range(0..e.len())];
                        x * x
                    })
                    .sum();
                (ss / e.len() as f64).sqrt().max(f64::MIN_POSITIVE).ln()
            })
            .collect();
        slopes.push(least_squares(&lx, &ly).0);
    }
    slopes.sort_by(|a, b| a.total_cmp(b));
    let at = |q: f64| slopes[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok(RateFit {
        ci: (at(0.025).min(point.slope), at(0.975).max(point.slope)),
        ..point
    })
}

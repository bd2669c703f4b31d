//! Closed-form and quadrature references, kept independent of the samplers
//! they are used to check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Exact filter for `x' = a x + N(0, q)`, `y = x + N(0, r)`, prior
/// `N(m0, p0)`. Entry `t` is the posterior `(mean, var)` after `ys[t]`; the
/// prior is propagated once before the first update.
pub fn kalman_filter_1d(a: f64, q: f64, r: f64, m0: f64, p0: f64, ys: &[f64]) -> Vec<(f64, f64)> {
    let (mut m, mut p) = (m0, p0);
    ys.iter()
        .map(|y| {
            m *= a;
            p = a * a * p + q;
            let k = p / (p + r);
            m += k * (y - m);
            p *= 1.0 - k;
            (m, p)
        })
        .collect()
}

/// Posterior of `x ~ N(m, P)` given `y = H x + N(0, R)`.
pub fn linear_gaussian_posterior(
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s = h * p * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(Error::NotPositiveDefinite {
        context: "innovation covariance",
    })?;
    let gain = p * h.transpose() * s_inv;
    let mean = m + &gain * (y - h * m);
    let cov = p - &gain * h * p;
    Ok((mean, cov))
}

/// Closed-form `E[x0 | x_t]` for `x0 ~ N(mu, v)` and
/// `x_t = sqrt(ab) x0 + sqrt(1 - ab) e`.
pub fn gaussian_tweedie_1d(mu: f64, v: f64, x_t: f64, alpha_bar: f64) -> f64 {
    let s = alpha_bar.sqrt();
    mu + v * s / (alpha_bar * v + 1.0 - alpha_bar) * (x_t - s * mu)
}

/// `E[x0 | x_t]` for a 1D Gaussian mixture prior by composite Simpson
/// quadrature over `x0` with `n_intervals` (even) intervals.
pub fn gmm_tweedie_quadrature_1d(
    weights: &[f64],
    means: &[f64],
    vars: &[f64],
    x_t: f64,
    alpha_bar: f64,
    n_intervals: usize,
) -> f64 {
    let n = n_intervals + n_intervals % 2;
    let lo = means.iter().zip(vars).map(|(m, v)| m - 12.0 * v.sqrt()).fold(f64::INFINITY, f64::min);
    let hi = means.iter().zip(vars).map(|(m, v)| m + 12.0 * v.sqrt()).fold(f64::NEG_INFINITY, f64::max);
    let h = (hi - lo) / n as f64;
    let noise = 1.0 - alpha_bar;
    let log_f = |x0: f64| {
        let prior = weights
            .iter()
            .zip(means.iter().zip(vars))
            .map(|(w, (m, v))| w * (-(x0 - m).powi(2) / (2.0 * v)).exp() / v.sqrt())
            .sum::<f64>()
            .ln();
        prior - (x_t - alpha_bar.sqrt() * x0).powi(2) / (2.0 * noise)
    };
    let logs: Vec<f64> = (0..=n).map(|i| log_f(lo + i as f64 * h)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, l) in logs.iter().enumerate() {
        let c = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let f = c * (l - top).exp();
        num += f * (lo + i as f64 * h);
        den += f;
    }
    num / den
}

/// `(d/2) log(2 pi e) + (1/2) log |cov|` from the determinant's log.
pub fn gaussian_entropy_closed(d: usize, log_det: f64) -> f64 {
    (d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_det) / 2.0
}

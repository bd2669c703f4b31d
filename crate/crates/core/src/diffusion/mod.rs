//! Variance-preserving diffusion: noise schedule, forward marginals,
//! Euler-Maruyama reverse sampling, Tweedie denoising, and likelihood-guided
//! variants for inverse problems and two-source separation.

mod guided;
mod score;

pub use guided::{dps_sample, joint_separate, GuidanceTarget, LinearGaussianLikelihood, LinearOperator};
pub use score::{FnScore, GmmScore, ScoreFunction};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::GaussianDensity;
use crate::rng::normal_vector;
use crate::{Real, RngStream};

/// Discrete linear schedule `beta_i = beta_min + (beta_max - beta_min)(i-1)/(N-1)`
/// for `i = 1..=N`, with `alpha_bar_0 = 1` and `alpha_bar_i = prod_{s<=i} (1 - beta_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule<T: Real> {
    beta_min: T,
    beta_max: T,
    betas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Real> DiffusionSchedule<T> {
    pub fn new(beta_min: T, beta_max: T, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be >= 1"));
        }
        if !(beta_min > T::zero() && beta_min <= beta_max && beta_max < T::one()) {
            return Err(Error::invalid("beta", "need 0 < beta_min <= beta_max < 1"));
        }
        let denom = T::lit((n_steps.max(2) - 1) as f64);
        let betas: Vec<T> = (0..n_steps)
            .map(|i| beta_min + (beta_max - beta_min) * T::lit(i as f64) / denom)
            .collect();
        let mut alpha_bars = Vec::with_capacity(n_steps + 1);
        alpha_bars.push(T::one());
        for b in &betas {
            let last = *alpha_bars.last().expect("non-empty");
            alpha_bars.push(last * (T::one() - *b));
        }
        if alpha_bars[n_steps] > T::lit(0.01) {
            return Err(Error::invalid(
                "beta",
                format!("final alpha_bar {} exceeds 0.01; raise beta_max or n_steps", alpha_bars[n_steps]),
            ));
        }
        Ok(Self {
            beta_min,
            beta_max,
            betas,
            alpha_bars,
        })
    }

    /// `beta in [1e-4, 0.02]` over 1000 steps.
    pub fn standard() -> Self {
        Self::new(T::lit(1e-4), T::lit(0.02), 1000).expect("standard schedule is valid")
    }

    /// Same continuous-time schedule as [`Self::standard`] (`beta(t)` from 0.1
    /// to 20) discretized with `n_steps` steps.
    pub fn scaled(n_steps: usize) -> Result<Self> {
        let n = T::lit(n_steps as f64);
        Self::new(T::lit(0.1) / n, T::lit(20.0) / n, n_steps)
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_min(&self) -> T {
        self.beta_min
    }

    pub fn beta_max(&self) -> T {
        self.beta_max
    }

    /// `beta_t` for `t` in `1..=N`.
    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        T::one() - self.beta(t)
    }

    /// `alpha_bar_t` for `t` in `0..=N`.
    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.n_steps() {
            return Err(Error::IndexOutOfRange {
                index: t,
                bound: self.n_steps() + 1,
            });
        }
        Ok(())
    }
}

/// `q(x_t | x_0) = N(sqrt(ab_t) x0, (1 - ab_t) I)`.
pub fn forward_marginal<T: Real>(schedule: &DiffusionSchedule<T>, t: usize, x0: &DVector<T>) -> Result<GaussianDensity<T>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let d = x0.len();
    GaussianDensity::new(x0 * ab.sqrt(), DMatrix::identity(d, d) * (T::one() - ab))
}

/// Tweedie estimate of `E[x0 | x_t]` from a score already evaluated at `x_t`.
pub fn tweedie_from_score<T: Real>(x: &DVector<T>, score: &DVector<T>, alpha_bar: T) -> DVector<T> {
    (x + score * (T::one() - alpha_bar)) / alpha_bar.sqrt()
}

/// `(x_t + (1 - ab_t) s(x_t, t)) / sqrt(ab_t)`.
pub fn tweedie_denoise<T: Real, S: ScoreFunction<T> + ?Sized>(
    x_t: &DVector<T>,
    t: usize,
    score: &S,
    schedule: &DiffusionSchedule<T>,
) -> Result<DVector<T>> {
    schedule.check_step(t)?;
    if t == 0 {
        return Ok(x_t.clone());
    }
    let ab = schedule.alpha_bar(t);
    Ok(tweedie_from_score(x_t, &score.score(x_t, ab)?, ab))
}

pub(crate) fn check_finite<T: Real>(x: &DVector<T>, context: &'static str, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context, step })
    }
}

/// One Euler-Maruyama step of the reverse VP-SDE,
/// `x + beta/2 x + beta drift + sqrt(beta) z`. No noise is added on the last step.
pub(crate) fn reverse_step<T: Real>(
    x: &DVector<T>,
    drift: &DVector<T>,
    beta: T,
    t: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> DVector<T> {
    let mut next = x * (T::one() + beta / T::lit(2.0)) + drift * beta;
    if t > 1 {
        next += normal_vector::<T, _>(rng, x.len()) * beta.sqrt();
    }
    next
}

/// Draws `n` samples by integrating the reverse SDE from `x_N ~ N(0, I)`.
/// Chain `i` uses `rng.substream(i)`.
pub fn reverse_sample<T: Real, S: ScoreFunction<T> + ?Sized>(
    score: &S,
    schedule: &DiffusionSchedule<T>,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<DVector<T>>> {
    let d = score.dim();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.substream(i as u64).rng();
            let mut x = normal_vector::<T, _>(&mut r, d);
            for t in (1..=schedule.n_steps()).rev() {
                let s = score.score(&x, schedule.alpha_bar(t))?;
                x = reverse_step(&x, &s, schedule.beta(t), t, &mut r);
                check_finite(&x, "reverse_sample", t)?;
            }
            Ok(x)
        })
        .collect()
}

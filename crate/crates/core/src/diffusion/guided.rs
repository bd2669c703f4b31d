//! Likelihood-guided reverse diffusion.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::score::ScoreFunction;
use super::{check_finite, reverse_step, tweedie_from_score, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::observation::isotropic_log_likelihood;
use crate::rng::normal_vector;
use crate::{Real, RngStream};

/// Linear measurement operator `f`.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearOperator<T: Real> {
    Identity(usize),
    Matrix(DMatrix<T>),
    /// Picks the listed coordinates of an input of length `dim`.
    Select { indices: Vec<usize>, dim: usize },
}

impl<T: Real> LinearOperator<T> {
    pub fn select(indices: Vec<usize>, dim: usize) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::IndexOutOfRange { index: i, bound: dim });
        }
        Ok(Self::Select { indices, dim })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Identity(d) => *d,
            Self::Matrix(m) => m.ncols(),
            Self::Select { dim, .. } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Identity(d) => *d,
            Self::Matrix(m) => m.nrows(),
            Self::Select { indices, .. } => indices.len(),
        }
    }

    pub fn apply(&self, x: &DVector<T>) -> DVector<T> {
        match self {
            Self::Identity(_) => x.clone(),
            Self::Matrix(m) => m * x,
            Self::Select { indices, .. } => DVector::from_iterator(indices.len(), indices.iter().map(|&i| x[i])),
        }
    }

    pub fn adjoint(&self, r: &DVector<T>) -> DVector<T> {
        match self {
            Self::Identity(_) => r.clone(),
            Self::Matrix(m) => m.tr_mul(r),
            Self::Select { indices, dim } => {
                let mut out = DVector::zeros(*dim);
                for (k, &i) in indices.iter().enumerate() {
                    out[i] += r[k];
                }
                out
            }
        }
    }

    /// Dense matrix form.
    pub fn to_matrix(&self) -> DMatrix<T> {
        match self {
            Self::Identity(d) => DMatrix::identity(*d, *d),
            Self::Matrix(m) => m.clone(),
            Self::Select { indices, dim } => {
                let mut m = DMatrix::zeros(indices.len(), *dim);
                for (k, &i) in indices.iter().enumerate() {
                    m[(k, i)] = T::one();
                }
                m
            }
        }
    }
}

/// `y = f(x) + n`, `n ~ N(0, noise_std^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianLikelihood<T: Real> {
    op: LinearOperator<T>,
    noise_std: T,
}

impl<T: Real> LinearGaussianLikelihood<T> {
    pub fn new(op: LinearOperator<T>, noise_std: T) -> Result<Self> {
        if !(noise_std > T::zero() && noise_std.is_finite()) {
            return Err(Error::invalid("noise_std", "must be finite and > 0"));
        }
        Ok(Self { op, noise_std })
    }

    pub fn op(&self) -> &LinearOperator<T> {
        &self.op
    }

    pub fn noise_std(&self) -> T {
        self.noise_std
    }

    pub fn log_likelihood(&self, y: &DVector<T>, x: &DVector<T>) -> Result<T> {
        isotropic_log_likelihood(y, &self.op.apply(x), self.noise_std)
    }
}

/// Diffusion posterior sampling.
///
/// Each reverse step adds the likelihood gradient at the Tweedie estimate,
/// `grad_x log N(y; f(x0_hat(x)), s^2 I) = J f^T (y - f(x0_hat)) / s^2` with
/// `J = (I + (1 - ab) H) / sqrt(ab)` and `H` the score Hessian, scaled by
/// `guidance_scale`, to the prior score in the Euler-Maruyama drift.
pub fn dps_sample<T: Real, S: ScoreFunction<T> + ?Sized>(
    score: &S,
    lik: &LinearGaussianLikelihood<T>,
    y: &DVector<T>,
    schedule: &DiffusionSchedule<T>,
    guidance_scale: T,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<DVector<T>>> {
    let d = score.dim();
    if lik.op.input_dim() != d {
        return Err(Error::dims("likelihood operator input", d, lik.op.input_dim()));
    }
    if y.len() != lik.op.output_dim() {
        return Err(Error::dims("observation", lik.op.output_dim(), y.len()));
    }
    if !(guidance_scale >= T::zero() && guidance_scale.is_finite()) {
        return Err(Error::invalid("guidance_scale", "must be finite and >= 0"));
    }
    let weight = guidance_scale / (lik.noise_std * lik.noise_std);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.substream(i as u64).rng();
            let mut x = normal_vector::<T, _>(&mut r, d);
            for t in (1..=schedule.n_steps()).rev() {
                let ab = schedule.alpha_bar(t);
                let mut u_out = DVector::zeros(0);
                let (s, hu) = score.score_hvp(&x, ab, &mut |s| {
                    let x0 = tweedie_from_score(&x, s, ab);
                    let u = lik.op.adjoint(&(y - lik.op.apply(&x0)));
                    u_out = u.clone();
                    Ok(u)
                })?;
                let guide = (u_out + hu * (T::one() - ab)) * (weight / ab.sqrt());
                check_finite(&guide, "dps guidance gradient", t)?;
                x = reverse_step(&x, &(s + guide), schedule.beta(t), t, &mut r);
                check_finite(&x, "dps_sample", t)?;
            }
            Ok(x)
        })
        .collect()
}

/// Observation the separation likelihood is centred on at each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceTarget {
    /// The measured `y` at every step.
    #[default]
    Observed,
    /// A fresh forward-perturbed `sqrt(ab) y + sqrt(1 - ab) e` per step.
    Perturbed,
}

/// Joint reverse diffusion of two sources with `y = x + h + n`,
/// `n ~ N(0, rho^2 I)`. Both chains share the residual
/// `(y_t - x_t - h_t) / rho^2` as a likelihood score.
#[allow(clippy::too_many_arguments)]
pub fn joint_separate<T: Real, SX: ScoreFunction<T> + ?Sized, SH: ScoreFunction<T> + ?Sized>(
    score_x: &SX,
    score_h: &SH,
    y: &DVector<T>,
    rho: T,
    schedule: &DiffusionSchedule<T>,
    n: usize,
    rng: &RngStream,
    target: GuidanceTarget,
) -> Result<Vec<(DVector<T>, DVector<T>)>> {
    let d = y.len();
    if score_x.dim() != d || score_h.dim() != d {
        return Err(Error::dims("source dimension", d, score_x.dim().max(score_h.dim())));
    }
    if !(rho > T::zero() && rho.is_finite()) {
        return Err(Error::invalid("rho", "must be finite and > 0"));
    }
    let inv_var = T::one() / (rho * rho);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let base = rng.substream(i as u64);
            let mut rx = base.labeled("x").rng();
            let mut rh = base.labeled("h").rng();
            let mut ry = base.labeled("y").rng();
            let mut x = normal_vector::<T, _>(&mut rx, d);
            let mut h = normal_vector::<T, _>(&mut rh, d);
            for t in (1..=schedule.n_steps()).rev() {
                let ab = schedule.alpha_bar(t);
                let yt = match target {
                    GuidanceTarget::Observed => y.clone(),
                    GuidanceTarget::Perturbed => {
                        y * ab.sqrt() + normal_vector::<T, _>(&mut ry, d) * (T::one() - ab).sqrt()
                    }
                };
                let resid = (yt - &x - &h) * inv_var;
                check_finite(&resid, "separation guidance", t)?;
                let sx = score_x.score(&x, ab)? + &resid;
                let sh = score_h.score(&h, ab)? + &resid;
                let beta = schedule.beta(t);
                x = reverse_step(&x, &sx, beta, t, &mut rx);
                h = reverse_step(&h, &sh, beta, t, &mut rh);
                check_finite(&x, "joint_separate", t)?;
                check_finite(&h, "joint_separate", t)?;
            }
            Ok((x, h))
        })
        .collect()
}

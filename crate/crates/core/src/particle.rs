//! Bootstrap particle filter: transition-prior proposals, likelihood
//! reweighting in log-space, systematic resampling, and one-step
//! posterior-predictive draws of hypothetical future observations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{check_symmetric, psd_sqrt};
use crate::gmm::check_probability_vector;
use crate::observation::{ObservationModel, StreamRng};
use crate::rng::normal_vector;
use crate::scalar::log_sum_exp;
use crate::{Real, RngStream};

/// Weighted sample representation of a posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble<T: Real> {
    states: Vec<DVector<T>>,
    weights: Vec<T>,
}

impl<T: Real> ParticleEnsemble<T> {
    pub fn new(states: Vec<DVector<T>>, weights: Vec<T>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Empty("particle ensemble"));
        }
        if states.len() != weights.len() {
            return Err(Error::dims("ensemble weights", states.len(), weights.len()));
        }
        let d = states[0].len();
        if let Some(s) = states.iter().find(|s| s.len() != d) {
            return Err(Error::dims("ensemble state", d, s.len()));
        }
        check_probability_vector(&weights, "ensemble weights", 1e-9)?;
        Ok(Self { states, weights })
    }

    pub fn uniform(states: Vec<DVector<T>>) -> Result<Self> {
        let n = states.len().max(1);
        let w = vec![T::one() / T::lit(n as f64); states.len()];
        Self::new(states, w)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn states(&self) -> &[DVector<T>] {
        &self.states
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Effective sample size `1 / sum w_i^2`.
    pub fn ess(&self) -> T {
        T::one() / self.weights.iter().map(|w| *w * *w).sum::<T>()
    }

    pub fn mean(&self) -> DVector<T> {
        let mut m = DVector::zeros(self.dim());
        for (s, w) in self.states.iter().zip(&self.weights) {
            m.axpy(*w, s, T::one());
        }
        m
    }

    /// Weighted covariance of the particle distribution, `sum w_i (x_i - m)(x_i - m)^T`.
    pub fn covariance(&self) -> DMatrix<T> {
        let m = self.mean();
        let d = self.dim();
        let mut c = DMatrix::zeros(d, d);
        for (s, w) in self.states.iter().zip(&self.weights) {
            let diff = s - &m;
            c.syger(*w, &diff, &diff, T::one());
        }
        c.fill_upper_triangle_with_lower_triangle();
        c
    }
}

/// `x_t = A x_{t-1} + eta`, `eta ~ N(0, noise_cov)`.
#[derive(Clone, Debug)]
pub struct LinearGaussianDynamics<T: Real> {
    transition: DMatrix<T>,
    noise_cov: DMatrix<T>,
    noise_factor: DMatrix<T>,
}

impl<T: Real> LinearGaussianDynamics<T> {
    pub fn new(transition: DMatrix<T>, noise_cov: DMatrix<T>) -> Result<Self> {
        if !transition.is_square() {
            return Err(Error::dims("transition matrix", transition.nrows(), transition.ncols()));
        }
        if noise_cov.nrows() != transition.nrows() || noise_cov.ncols() != transition.nrows() {
            return Err(Error::dims("process noise", transition.nrows(), noise_cov.nrows()));
        }
        check_symmetric(&noise_cov, "process noise")?;
        let scale = noise_cov.iter().fold(T::zero(), |a, v| a.max(v.abs()));
        let min_eig = SymmetricEigen::new(noise_cov.clone()).eigenvalues.min();
        if min_eig < -T::lit(1e-10) * scale.max(T::one()) {
            return Err(Error::NotPositiveDefinite { context: "process noise" });
        }
        let noise_factor = psd_sqrt(&noise_cov);
        Ok(Self {
            transition,
            noise_cov,
            noise_factor,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim), DMatrix::zeros(dim, dim)).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<T> {
        &self.transition
    }

    pub fn noise_cov(&self) -> &DMatrix<T> {
        &self.noise_cov
    }

    pub fn step<R: Rng + ?Sized>(&self, x: &DVector<T>, rng: &mut R) -> DVector<T> {
        &self.transition * x + &self.noise_factor * normal_vector::<T, R>(rng, self.dim())
    }

    fn check(&self, e: &ParticleEnsemble<T>) -> Result<()> {
        if e.dim() != self.dim() {
            return Err(Error::dims("dynamics vs ensemble", self.dim(), e.dim()));
        }
        Ok(())
    }
}

/// Propagates every particle through the transition prior; weights are untouched.
pub fn predict<T: Real>(
    e: &ParticleEnsemble<T>,
    dynamics: &LinearGaussianDynamics<T>,
    rng: &RngStream,
) -> Result<ParticleEnsemble<T>> {
    dynamics.check(e)?;
    let states = e
        .states
        .par_iter()
        .enumerate()
        .map(|(i, x)| dynamics.step(x, &mut rng.substream(i as u64).rng()))
        .collect();
    Ok(ParticleEnsemble {
        states,
        weights: e.weights.clone(),
    })
}

/// Reweights by `p(obs | x_i, action)` and renormalizes in log-space.
///
/// Returns the updated ensemble and the log-evidence increment
/// `log sum_i w_i p(obs | x_i, action)`.
pub fn update_weights<T: Real, M: ObservationModel<T>>(
    e: &ParticleEnsemble<T>,
    obs: &DVector<T>,
    model: &M,
    action: &M::Action,
) -> Result<(ParticleEnsemble<T>, T)> {
    let log_lik = e
        .states
        .par_iter()
        .map(|x| model.log_likelihood(obs, x, action))
        .collect::<Result<Vec<T>>>()?;
    let log_joint: Vec<T> = e
        .weights
        .iter()
        .zip(&log_lik)
        .map(|(w, ll)| {
            if *w > T::zero() {
                w.ln() + *ll
            } else {
                T::lit(f64::NEG_INFINITY)
            }
        })
        .collect();
    if log_joint.iter().any(|v| v.to_f64_lossy().is_nan() || v.to_f64_lossy() == f64::INFINITY) {
        return Err(Error::NonFinite {
            context: "particle log-likelihood",
            step: 0,
        });
    }
    let log_evidence = log_sum_exp(&log_joint);
    if !log_evidence.is_finite() {
        return Err(Error::FilterDivergence);
    }
    let mut weights: Vec<T> = log_joint.iter().map(|v| (*v - log_evidence).exp()).collect();
    let total: T = weights.iter().copied().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok((
        ParticleEnsemble {
            states: e.states.clone(),
            weights,
        },
        log_evidence,
    ))
}

/// Systematic resampling: one uniform offset, `N` evenly spaced pointers.
/// Offspring counts of particle `i` lie in `{floor(N w_i), ceil(N w_i)}`.
pub fn systematic_resample<T: Real>(e: &ParticleEnsemble<T>, rng: &RngStream) -> ParticleEnsemble<T> {
    let n = e.len();
    let offset: f64 = rng.rng().random::<f64>();
    let idx = systematic_indices(&e.weights, offset);
    let states = idx.into_iter().map(|i| e.states[i].clone()).collect();
    let w = T::one() / T::lit(n as f64);
    ParticleEnsemble {
        states,
        weights: vec![w; n],
    }
}

/// Ancestor indices for systematic resampling with offset `u in [0, 1)`.
pub fn systematic_indices<T: Real>(weights: &[T], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0].to_f64_lossy() * n as f64;
    let mut i = 0;
    for j in 0..n {
        let pointer = u + j as f64;
        while pointer >= cumulative && i + 1 < n {
            i += 1;
            cumulative += weights[i].to_f64_lossy() * n as f64;
        }
        out.push(i);
    }
    out
}

/// Resamples when `ESS < threshold_fraction * N`. Returns whether it did.
pub fn resample_if_needed<T: Real>(
    e: &ParticleEnsemble<T>,
    threshold_fraction: f64,
    rng: &RngStream,
) -> (ParticleEnsemble<T>, bool) {
    if e.ess().to_f64_lossy() < threshold_fraction * e.len() as f64 {
        (systematic_resample(e, rng), true)
    } else {
        (e.clone(), false)
    }
}

/// Hypothetical next-step observations, one per particle.
#[derive(Clone, Debug)]
pub struct PredictiveDraws<T: Real> {
    /// Noise-free `f(x_i', a)` for each propagated particle.
    pub means: Vec<DVector<T>>,
    /// `y_i ~ p(y | x_i', a)`.
    pub observations: Vec<DVector<T>>,
    /// Particle weights the draws inherit.
    pub weights: Vec<T>,
}

impl<T: Real> PredictiveDraws<T> {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Projects the ensemble one step forward through `dynamics` and draws an
/// observation per particle under `action`.
pub fn posterior_predictive<T: Real, M: ObservationModel<T>>(
    e: &ParticleEnsemble<T>,
    dynamics: &LinearGaussianDynamics<T>,
    model: &M,
    action: &M::Action,
    rng: &RngStream,
) -> Result<PredictiveDraws<T>> {
    dynamics.check(e)?;
    let pairs: Vec<(DVector<T>, DVector<T>)> = e
        .states
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r: StreamRng = rng.substream(i as u64).rng();
            let next = dynamics.step(x, &mut r);
            let mean = model.mean(&next, action);
            let obs = model.sample(&next, action, &mut r);
            (mean, obs)
        })
        .collect();
    let (means, observations) = pairs.into_iter().unzip();
    Ok(PredictiveDraws {
        means,
        observations,
        weights: e.weights.clone(),
    })
}

//! Entropy and mutual-information estimators used as the action-value
//! functional: information gain = marginal entropy of predicted observations
//! minus their state-conditional entropy.
//!
//! All entropies include the `(d/2) log(2 pi e)` constant, so values are
//! absolute differential entropies in nats.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{gaussian_entropy, log_det_psd, sample_covariance, weighted_covariance};
use crate::gmm::GmmDensity;
use crate::observation::ObservationModel;
use crate::particle::{ParticleEnsemble, PredictiveDraws};
use crate::scalar::log_sum_exp;
use crate::{Real, RngStream};

/// How the marginal distribution of predicted observations is modelled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarginalEntropyModel<T: Real> {
    /// Multivariate Gaussian fitted by (weighted) sample covariance of the draws.
    GaussianSampleCovariance,
    /// Independent per-coordinate Gaussians (diagonal of the sample covariance).
    GaussianPixelwise,
    /// Mixture of `N(f(x_i), noise_std^2 I)` with the pairwise-KL variational entropy.
    GmmVariational { noise_std: T },
    /// Same mixture, using the closed form for shared isotropic covariances.
    GmmIsotropic { noise_std: T },
}

impl<T: Real> MarginalEntropyModel<T> {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::GmmVariational { noise_std } | Self::GmmIsotropic { noise_std } if *noise_std <= T::zero() => {
                Err(Error::invalid("noise_std", "must be > 0 for mixture entropy models"))
            }
            _ => Ok(()),
        }
    }
}

fn half_log_2pi_e<T: Real>() -> T {
    (T::two_pi() * T::e()).ln() / T::lit(2.0)
}

/// Gaussian entropy of the unbiased sample covariance of `samples`.
pub fn gaussian_entropy_from_samples<T: Real>(samples: &[DVector<T>]) -> Result<T> {
    gaussian_entropy(&sample_covariance(samples)?)
}

/// Gaussian entropy of the reliability-weighted sample covariance.
pub fn gaussian_entropy_weighted<T: Real>(samples: &[DVector<T>], weights: &[T]) -> Result<T> {
    gaussian_entropy(&weighted_covariance(samples, weights)?)
}

/// Sum of per-coordinate Gaussian entropies of the weighted sample variances.
pub fn pixelwise_entropy<T: Real>(samples: &[DVector<T>], weights: &[T]) -> Result<T> {
    let cov = weighted_covariance(samples, weights)?;
    let diag = DMatrix::from_diagonal(&cov.diagonal());
    gaussian_entropy(&diag)
}

/// Expected entropy of `y` given the state, `E_x H[p(y | x, a)]`.
///
/// Uses the closed-form noise entropy when the model declares additive
/// Gaussian noise; otherwise falls back to [`conditional_entropy_sampled`].
pub fn conditional_entropy<T: Real, M: ObservationModel<T>>(
    model: &M,
    particles: &ParticleEnsemble<T>,
    action: &M::Action,
    n_inner: usize,
    rng: &RngStream,
) -> Result<T> {
    if particles.is_empty() {
        return Err(Error::Empty("particle ensemble"));
    }
    match model.additive_noise_cov(action) {
        Some(cov) => gaussian_entropy(&cov),
        None => conditional_entropy_sampled(model, particles, action, n_inner, rng),
    }
}

/// Per-particle Gaussian fit to `n_inner` observation draws, averaged with
/// the particle weights: `(d/2) log(2 pi e) + sum_i w_i (1/2) log |S_i|`.
pub fn conditional_entropy_sampled<T: Real, M: ObservationModel<T>>(
    model: &M,
    particles: &ParticleEnsemble<T>,
    action: &M::Action,
    n_inner: usize,
    rng: &RngStream,
) -> Result<T> {
    if particles.is_empty() {
        return Err(Error::Empty("particle ensemble"));
    }
    if n_inner < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: n_inner,
        });
    }
    let half_log_dets = particles
        .states()
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = rng.substream(i as u64).rng();
            let draws: Vec<DVector<T>> = (0..n_inner).map(|_| model.sample(x, action, &mut r)).collect();
            Ok(log_det_psd(&sample_covariance(&draws)?)? / T::lit(2.0))
        })
        .collect::<Result<Vec<T>>>()?;
    let d = T::lit(model.obs_dim(action) as f64);
    let avg: T = half_log_dets.iter().zip(particles.weights()).map(|(h, w)| *h * *w).sum();
    Ok(d * half_log_2pi_e::<T>() + avg)
}

/// Pairwise-KL variational approximation to the entropy of a Gaussian mixture:
/// `-sum_i w_i log sum_j w_j exp(-KL(N_i || N_j)) + sum_i w_i H[N_i]`.
pub fn gmm_entropy_variational<T: Real>(mix: &GmmDensity<T>) -> Result<T> {
    let comps = mix.components();
    let w = mix.weights();
    let d = mix.dim();
    let precisions: Vec<DMatrix<T>> = comps
        .iter()
        .map(|c| {
            c.cov()
                .clone()
                .cholesky()
                .map(|ch| ch.inverse())
                .ok_or(Error::NotPositiveDefinite {
                    context: "mixture component covariance",
                })
        })
        .collect::<Result<_>>()?;
    let dd = T::lit(d as f64);
    let mut cross = T::zero();
    let mut own = T::zero();
    for i in 0..comps.len() {
        if w[i] <= T::zero() {
            continue;
        }
        let terms: Vec<T> = (0..comps.len())
            .map(|j| {
                if w[j] <= T::zero() {
                    return T::lit(f64::NEG_INFINITY);
                }
                let diff = comps[j].mean() - comps[i].mean();
                let trace = precisions[j].component_mul(comps[i].cov()).sum();
                let maha = diff.dot(&(&precisions[j] * &diff));
                let kl = (trace + maha - dd + comps[j].log_det() - comps[i].log_det()) / T::lit(2.0);
                w[j].ln() - kl
            })
            .collect();
        cross -= w[i] * log_sum_exp(&terms);
        own += w[i] * comps[i].entropy();
    }
    Ok(cross + own)
}

/// Isotropic special case of [`gmm_entropy_variational`]:
/// `(d/2) log(2 pi e s^2) - sum_i w_i log sum_j w_j exp(-|m_i - m_j|^2 / (2 s^2))`.
pub fn gmm_entropy_isotropic<T: Real>(means: &[DVector<T>], weights: &[T], noise_std: T) -> Result<T> {
    if noise_std <= T::zero() {
        return Err(Error::invalid("noise_std", "must be > 0"));
    }
    if means.is_empty() {
        return Err(Error::Empty("mixture means"));
    }
    if means.len() != weights.len() {
        return Err(Error::dims("mixture weights", means.len(), weights.len()));
    }
    let d = means[0].len();
    if let Some(m) = means.iter().find(|m| m.len() != d) {
        return Err(Error::dims("mixture mean", d, m.len()));
    }
    let two_var = T::lit(2.0) * noise_std * noise_std;
    let log_w: Vec<T> = weights.iter().map(|w| w.ln()).collect();
    let cross: T = means
        .par_iter()
        .zip(weights.par_iter())
        .filter(|(_, w)| **w > T::zero())
        .map(|(mi, wi)| {
            let terms: Vec<T> = means
                .iter()
                .zip(&log_w)
                .map(|(mj, lw)| *lw - (mi - mj).norm_squared() / two_var)
                .collect();
            *wi * log_sum_exp(&terms)
        })
        .collect::<Vec<T>>()
        .into_iter()
        .sum();
    let dd = T::lit(d as f64);
    Ok(dd * (half_log_2pi_e::<T>() + noise_std.ln()) - cross)
}

/// Entropy of the predicted observations under `model`.
pub fn marginal_entropy<T: Real>(pred: &PredictiveDraws<T>, model: &MarginalEntropyModel<T>) -> Result<T> {
    model.validate()?;
    if pred.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: pred.len(),
        });
    }
    match *model {
        MarginalEntropyModel::GaussianSampleCovariance => gaussian_entropy_weighted(&pred.observations, &pred.weights),
        MarginalEntropyModel::GaussianPixelwise => pixelwise_entropy(&pred.observations, &pred.weights),
        MarginalEntropyModel::GmmIsotropic { noise_std } => gmm_entropy_isotropic(&pred.means, &pred.weights, noise_std),
        MarginalEntropyModel::GmmVariational { noise_std } => {
            let mix = GmmDensity::isotropic(pred.means.clone(), pred.weights.clone(), noise_std * noise_std)?;
            gmm_entropy_variational(&mix)
        }
    }
}

/// Marginal entropy when the observation noise is additive with known
/// covariance: the Gaussian models use `Cov_w(f(x_i)) + noise_cov` instead of
/// the covariance of the noisy draws, which removes the finite-sample bias of
/// the noise part. Mixture models already use the noise-free means.
pub fn marginal_entropy_known_noise<T: Real>(
    pred: &PredictiveDraws<T>,
    model: &MarginalEntropyModel<T>,
    noise_cov: &DMatrix<T>,
) -> Result<T> {
    model.validate()?;
    if pred.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: pred.len(),
        });
    }
    let fitted = || -> Result<DMatrix<T>> {
        let c = weighted_covariance(&pred.means, &pred.weights)?;
        if c.shape() != noise_cov.shape() {
            return Err(Error::dims("noise covariance", c.nrows(), noise_cov.nrows()));
        }
        Ok(c + noise_cov)
    };
    match *model {
        MarginalEntropyModel::GaussianSampleCovariance => gaussian_entropy(&fitted()?),
        MarginalEntropyModel::GaussianPixelwise => gaussian_entropy(&DMatrix::from_diagonal(&fitted()?.diagonal())),
        _ => marginal_entropy(pred, model),
    }
}

/// Information-gain estimate `H(y | a) - H(y | x, a)`.
pub fn expected_information_gain<T: Real>(
    pred: &PredictiveDraws<T>,
    model: &MarginalEntropyModel<T>,
    conditional_h: T,
) -> Result<T> {
    if pred.means.len() != pred.observations.len() || pred.weights.len() != pred.observations.len() {
        return Err(Error::dims("predictive draws", pred.observations.len(), pred.means.len()));
    }
    Ok(marginal_entropy(pred, model)? - conditional_h)
}

//! Observation-model contract shared by the particle filter, the entropy
//! estimators and the environments.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::normal_vector;
use crate::Real;

/// Generator type handed out by [`crate::RngStream::rng`].
pub type StreamRng = ChaCha8Rng;

/// `p(y | x, a)` for an active perceiver: the action shapes the observation,
/// never the state.
pub trait ObservationModel<T: Real>: Sync {
    type Action: Clone + Send + Sync;

    fn obs_dim(&self, action: &Self::Action) -> usize;

    /// Noise-free observation `f(x; a)`.
    fn mean(&self, state: &DVector<T>, action: &Self::Action) -> DVector<T>;

    /// One draw `y ~ p(y | x, a)`.
    fn sample(&self, state: &DVector<T>, action: &Self::Action, rng: &mut StreamRng) -> DVector<T>;

    fn log_likelihood(&self, obs: &DVector<T>, state: &DVector<T>, action: &Self::Action) -> Result<T>;

    /// Covariance of the noise when it is additive, Gaussian and independent
    /// of the state. `None` forces sample-based conditional entropy.
    fn additive_noise_cov(&self, _action: &Self::Action) -> Option<DMatrix<T>> {
        None
    }
}

/// Log-density of `obs` under `N(mean, std^2 I)`.
pub fn isotropic_log_likelihood<T: Real>(obs: &DVector<T>, mean: &DVector<T>, std: T) -> Result<T> {
    if obs.len() != mean.len() {
        return Err(Error::dims("observation", mean.len(), obs.len()));
    }
    let var = std * std;
    let d = T::lit(obs.len() as f64);
    let sq = (obs - mean).norm_squared();
    Ok(-(sq / var + d * (T::two_pi() * var).ln()) / T::lit(2.0))
}

/// `y = H x + n`, `n ~ N(0, std^2 I)`. The action is ignored.
#[derive(Clone, Debug)]
pub struct LinearObservation<T: Real> {
    matrix: DMatrix<T>,
    noise_std: T,
}

impl<T: Real> LinearObservation<T> {
    pub fn new(matrix: DMatrix<T>, noise_std: T) -> Result<Self> {
        if noise_std <= T::zero() {
            return Err(Error::invalid("noise_std", "must be > 0"));
        }
        Ok(Self { matrix, noise_std })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn noise_std(&self) -> T {
        self.noise_std
    }
}

impl<T: Real> ObservationModel<T> for LinearObservation<T> {
    type Action = ();

    fn obs_dim(&self, _: &()) -> usize {
        self.matrix.nrows()
    }

    fn mean(&self, state: &DVector<T>, _: &()) -> DVector<T> {
        &self.matrix * state
    }

    fn sample(&self, state: &DVector<T>, a: &(), rng: &mut StreamRng) -> DVector<T> {
        self.mean(state, a) + normal_vector::<T, _>(rng, self.matrix.nrows()) * self.noise_std
    }

    fn log_likelihood(&self, obs: &DVector<T>, state: &DVector<T>, a: &()) -> Result<T> {
        isotropic_log_likelihood(obs, &self.mean(state, a), self.noise_std)
    }

    fn additive_noise_cov(&self, _: &()) -> Option<DMatrix<T>> {
        let d = self.matrix.nrows();
        Some(DMatrix::identity(d, d) * (self.noise_std * self.noise_std))
    }
}

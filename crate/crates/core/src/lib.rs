//! Cognitive ultrasound: perception-action loops over probabilistic state
//! estimates, with information-gain action selection and diffusion priors.

pub mod agent;
pub mod config;
pub mod diffusion;
pub mod entropy;
pub mod env;
pub mod error;
pub mod gaussian;
pub mod gmm;
pub mod observation;
pub mod oracle;
pub mod particle;
pub mod rng;
pub mod scalar;
pub mod validation;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Real;

pub type Gaussian = gaussian::GaussianDensity<f64>;
pub type Gmm = gmm::GmmDensity<f64>;
pub type Ensemble = particle::ParticleEnsemble<f64>;

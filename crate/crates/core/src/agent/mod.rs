//! Perception-action loops: greedy information-gain action selection,
//! baseline policies, and the per-experiment loop drivers.

mod log;
mod separate;
mod subsample;
mod tracking;

pub use log::{digest, CsvRecord, RunHeader, TrialLog, ARTIFACT_VERSION};
pub use separate::{run_separation, SeparationRecord, SeparationSettings, SeparationSummary, SourcePrior};
pub use subsample::{
    line_scores, run_subsampling_loop, top_k_lines, DiffusionSettings, LineScore, SubsampleRecord, SubsampleSettings,
    SubsampleSummary,
};
pub use tracking::{run_tracking_loop, EntropyModelKind, TrackRecord, TrackingSettings, TrackingSummary};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{conditional_entropy, marginal_entropy, marginal_entropy_known_noise, MarginalEntropyModel};
use crate::error::{Error, Result};
use crate::gaussian::gaussian_entropy;
use crate::observation::ObservationModel;
use crate::particle::{predict, LinearGaussianDynamics, ParticleEnsemble, PredictiveDraws};
use crate::{Real, RngStream};

/// Discrete candidate actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSet<A> {
    actions: Vec<A>,
}

impl<A: PartialEq> ActionSet<A> {
    pub fn new(actions: Vec<A>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::Empty("action set"));
        }
        for (i, a) in actions.iter().enumerate() {
            if actions[..i].contains(a) {
                return Err(Error::invalid("action set", format!("duplicate candidate at index {i}")));
            }
        }
        Ok(Self { actions })
    }

    pub fn actions(&self) -> &[A] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&A> {
        self.actions.get(i)
    }

    pub fn position(&self, a: &A) -> Option<usize> {
        self.actions.iter().position(|b| b == a)
    }
}

/// How the loop picks its next action.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind<A> {
    #[default]
    MaxInfoGain,
    Static(A),
    Random,
    /// Uses ground truth; only the environment side can serve it.
    Oracle,
}

impl<A> PolicyKind<A> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MaxInfoGain => "max_info_gain",
            Self::Static(_) => "static",
            Self::Random => "random",
            Self::Oracle => "oracle",
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn select_action<T: Real>(values: &[T]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::Empty("action values"));
    }
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v.to_f64_lossy().is_nan() {
            return Err(Error::NonFinite {
                context: "action value",
                step: i,
            });
        }
        if *v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per-candidate entropy terms; `information_gain = marginal - conditional`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionScores<T> {
    pub information_gain: Vec<T>,
    pub marginal: Vec<T>,
    pub conditional: Vec<T>,
}

/// Expected information gain of every candidate.
///
/// The ensemble is propagated once and every candidate sees the same
/// propagated particles and observation-noise draws, so values do not depend
/// on candidate order and differences between candidates carry no
/// independent Monte-Carlo noise.
pub fn score_actions<T: Real, M: ObservationModel<T>>(
    e: &ParticleEnsemble<T>,
    dynamics: &LinearGaussianDynamics<T>,
    model: &M,
    candidates: &ActionSet<M::Action>,
    entropy_model: &MarginalEntropyModel<T>,
    n_inner: usize,
    rng: &RngStream,
) -> Result<ActionScores<T>>
where
    M::Action: PartialEq,
{
    entropy_model.validate()?;
    let propagated = predict(e, dynamics, &rng.labeled("propagate"))?;
    let obs_rng = rng.labeled("observe");
    let inner_rng = rng.labeled("inner");
    let per: Vec<(T, T)> = candidates
        .actions()
        .par_iter()
        .map(|a| {
            let means: Vec<DVector<T>> = propagated.states().iter().map(|x| model.mean(x, a)).collect();
            match model.additive_noise_cov(a) {
                Some(noise) => {
                    let draws = PredictiveDraws {
                        observations: means.clone(),
                        means,
                        weights: propagated.weights().to_vec(),
                    };
                    Ok((marginal_entropy_known_noise(&draws, entropy_model, &noise)?, gaussian_entropy(&noise)?))
                }
                None => {
                    let observations = propagated
                        .states()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| model.sample(x, a, &mut obs_rng.substream(i as u64).rng()))
                        .collect();
                    let draws = PredictiveDraws {
                        means,
                        observations,
                        weights: propagated.weights().to_vec(),
                    };
                    let h = conditional_entropy(model, &propagated, a, n_inner, &inner_rng)?;
                    Ok((marginal_entropy(&draws, entropy_model)?, h))
                }
            }
        })
        .collect::<Result<_>>()?;
    let (marginal, conditional): (Vec<T>, Vec<T>) = per.into_iter().unzip();
    let information_gain = marginal.iter().zip(&conditional).map(|(m, c)| *m - *c).collect();
    Ok(ActionScores {
        information_gain,
        marginal,
        conditional,
    })
}

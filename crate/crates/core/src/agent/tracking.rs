use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::log::{digest, CsvRecord, RunHeader, TrialLog};
use super::{score_actions, select_action, ActionSet, PolicyKind};
use crate::entropy::MarginalEntropyModel;
use crate::env::{
    candidate_angles, estimate_frequency, reflect_into, BeamObservationModel, BeamParams, DopplerEnvironment,
    DopplerState, SlowTimeParams,
};
use crate::error::{Error, Result};
use crate::particle::{predict, resample_if_needed, update_weights, LinearGaussianDynamics, ParticleEnsemble};
use crate::rng::normal;
use crate::RngStream;

/// Marginal-entropy model selector; mixture variants use the beam noise std.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyModelKind {
    #[default]
    GaussianSampleCovariance,
    GaussianPixelwise,
    GmmVariational,
    GmmIsotropic,
}

impl EntropyModelKind {
    pub fn to_model(self, noise_std: f64) -> MarginalEntropyModel<f64> {
        match self {
            Self::GaussianSampleCovariance => MarginalEntropyModel::GaussianSampleCovariance,
            Self::GaussianPixelwise => MarginalEntropyModel::GaussianPixelwise,
            Self::GmmVariational => MarginalEntropyModel::GmmVariational { noise_std },
            Self::GmmIsotropic => MarginalEntropyModel::GmmIsotropic { noise_std },
        }
    }
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingSettings {
    pub beam: BeamParams,
    pub slow_time: SlowTimeParams,
    /// Random-walk std per step of `(theta, z, omega)`.
    pub process_std: [f64; 3],
    pub initial_mean: [f64; 3],
    pub initial_std: [f64; 3],
    pub n_candidates: usize,
    pub n_particles: usize,
    /// Resample when `ESS < resample_threshold * N_p`.
    pub resample_threshold: f64,
    pub n_inner: usize,
    pub entropy_model: EntropyModelKind,
    pub policy: PolicyKind<f64>,
    pub t_steps: usize,
    /// Score candidates on every step even when the policy ignores the scores.
    pub log_action_values: bool,
}

impl Default for TrackingSettings {
    fn default() -> Self {
        Self {
            beam: BeamParams::default(),
            slow_time: SlowTimeParams::default(),
            process_std: [0.03, 0.0005, 0.01],
            initial_mean: [0.0, 0.06, 1.2],
            initial_std: [0.2, 0.003, 0.1],
            n_candidates: 15,
            n_particles: 512,
            resample_threshold: 0.5,
            n_inner: 256,
            entropy_model: EntropyModelKind::default(),
            policy: PolicyKind::MaxInfoGain,
            t_steps: 200,
            log_action_values: true,
        }
    }
}

impl TrackingSettings {
    /// Checks ranges; error paths are relative to this section.
    pub fn validate(&self) -> Result<()> {
        BeamObservationModel::new(self.beam.clone()).map_err(|e| config_err("beam", e.to_string()))?;
        if self.beam.noise_std <= 0.0 {
            return Err(config_err("beam.noise_std", "must be > 0 for the particle filter likelihood"));
        }
        let st = &self.slow_time;
        if st.n_samples < 2 || st.sample_rate.is_nan() || st.sample_rate <= 0.0 || st.band_lo.is_nan() || st.band_lo < 0.0 || st.band_lo >= st.band_hi {
            return Err(config_err("slow_time", "need n_samples >= 2, sample_rate > 0, 0 <= band_lo < band_hi"));
        }
        for (name, v) in [("process_std", self.process_std), ("initial_std", self.initial_std)] {
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(config_err(name, "entries must be finite and >= 0"));
            }
        }
        if self.initial_mean[0].abs() > self.beam.theta_max || self.initial_mean[1].is_nan() || self.initial_mean[1] <= 0.0 {
            return Err(config_err("initial_mean", "theta must lie in the field of view and z > 0"));
        }
        if self.n_candidates < 2 {
            return Err(config_err("n_candidates", "must be >= 2"));
        }
        if self.n_particles < 2 {
            return Err(config_err("n_particles", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(config_err("resample_threshold", "must lie in [0, 1]"));
        }
        if self.n_inner < 2 {
            return Err(config_err("n_inner", "must be >= 2"));
        }
        if self.t_steps == 0 {
            return Err(config_err("t_steps", "must be >= 1"));
        }
        if let PolicyKind::Static(a) = self.policy {
            if self.static_index(a).is_none() {
                return Err(config_err("policy.static", format!("{a} is not one of the candidate angles")));
            }
        }
        Ok(())
    }

    pub fn candidates(&self) -> Vec<f64> {
        candidate_angles(self.n_candidates, self.beam.theta_max)
    }

    fn static_index(&self, a: f64) -> Option<usize> {
        self.candidates().iter().position(|c| (c - a).abs() < 1e-9)
    }

    fn dynamics(&self) -> Result<LinearGaussianDynamics<f64>> {
        let q = DVector::from_iterator(3, self.process_std.iter().map(|s| s * s));
        LinearGaussianDynamics::new(DMatrix::identity(3, 3), DMatrix::from_diagonal(&q))
    }

    fn draw_state(&self, rng: &mut crate::observation::StreamRng) -> DopplerState {
        let m = self.initial_mean;
        let s = self.initial_std;
        DopplerState {
            theta: reflect_into(m[0] + s[0] * normal::<f64, _>(rng), -self.beam.theta_max, self.beam.theta_max),
            z: (m[1] + s[1] * normal::<f64, _>(rng)).abs(),
            omega: m[2] + s[2] * normal::<f64, _>(rng),
        }
    }

    fn prior_ensemble(&self, rng: &RngStream) -> Result<ParticleEnsemble<f64>> {
        let states = (0..self.n_particles)
            .map(|i| self.draw_state(&mut rng.substream(i as u64).rng()).to_vector())
            .collect();
        ParticleEnsemble::uniform(states)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub t: usize,
    pub action: f64,
    pub true_theta: f64,
    pub true_z: f64,
    pub true_omega: f64,
    pub post_mean: [f64; 3],
    pub post_cov: [[f64; 3]; 3],
    pub post_mean_theta: f64,
    pub post_std_theta: f64,
    /// ESS after the weight update, before any resampling.
    pub ess: f64,
    pub ig_best: Option<f64>,
    pub ig_chosen: Option<f64>,
    pub action_values: Vec<f64>,
    pub obs_digest: String,
    pub resampled: bool,
    pub reinitialized: bool,
    pub angle_error: f64,
    /// Heart-rate proxy: dominant slow-time frequency (Hz).
    pub hr_estimate: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CsvRecord for TrackRecord {
    fn csv_header() -> &'static [&'static str] {
        &[
            "t",
            "action",
            "true_theta",
            "true_z",
            "true_omega",
            "post_mean_theta",
            "post_std_theta",
            "ess",
            "ig_best",
            "ig_chosen",
        ]
    }

    fn csv_row(&self) -> Vec<String> {
        vec![
            self.t.to_string(),
            self.action.to_string(),
            self.true_theta.to_string(),
            self.true_z.to_string(),
            self.true_omega.to_string(),
            self.post_mean_theta.to_string(),
            self.post_std_theta.to_string(),
            self.ess.to_string(),
            opt(self.ig_best),
            opt(self.ig_chosen),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub angle_rmse: f64,
    /// Heart-rate proxy error (Hz) of the slow-time frequency estimate.
    pub hr_rmse: f64,
    pub hr_mae: f64,
    /// Error (Hz) of the filter's posterior mean of omega.
    pub omega_post_rmse: f64,
    pub resamples: usize,
    pub reinitializations: usize,
    /// Steps where the argmax of information gain and of marginal entropy
    /// differed although the conditional entropy was action-independent.
    pub marginal_argmax_mismatches: usize,
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n.max(1) as f64).sqrt()
}

/// Closed-loop beam steering on a moving Doppler target.
pub fn run_tracking_loop(s: &TrackingSettings, rng: &RngStream) -> Result<TrialLog<TrackRecord, TrackingSummary>> {
    s.validate()?;
    let model = BeamObservationModel::new(s.beam.clone())?;
    let dynamics = s.dynamics()?;
    let candidates = ActionSet::new(s.candidates())?;
    let entropy_model = s.entropy_model.to_model(s.beam.noise_std);
    let truth0 = s.draw_state(&mut rng.labeled("truth-init").rng());
    let mut env = DopplerEnvironment::new(
        model.clone(),
        dynamics.clone(),
        s.slow_time.clone(),
        truth0,
        rng.labeled("environment"),
    )?;
    let prior_rng = rng.labeled("prior");
    let mut reinits = 0usize;
    let mut e = s.prior_ensemble(&prior_rng.substream(0))?;
    let mut records = Vec::with_capacity(s.t_steps);
    let mut events = Vec::new();
    let mut mismatches = 0;
    let mut resamples = 0;
    let st = &s.slow_time;

    for t in 1..=s.t_steps {
        let step = rng.labeled("agent").substream(t as u64);
        let scores = if matches!(s.policy, PolicyKind::MaxInfoGain) || s.log_action_values {
            Some(score_actions(
                &e,
                &dynamics,
                &model,
                &candidates,
                &entropy_model,
                s.n_inner,
                &step.labeled("score"),
            )?)
        } else {
            None
        };
        let idx = match &s.policy {
            PolicyKind::MaxInfoGain => select_action(&scores.as_ref().expect("scored").information_gain)?,
            PolicyKind::Static(a) => s.static_index(*a).expect("validated static action"),
            PolicyKind::Random => step.labeled("policy").rng().random_range(0..candidates.len()),
            PolicyKind::Oracle => {
                let a = env.oracle_action(candidates.actions())?;
                candidates.position(&a).expect("oracle picks a candidate")
            }
        };
        let action = candidates.actions()[idx];
        if let Some(sc) = &scores {
            let constant = sc.conditional.iter().all(|c| *c == sc.conditional[0]);
            if constant && select_action(&sc.marginal)? != select_action(&sc.information_gain)? {
                mismatches += 1;
            }
        }

        env.advance()?;
        let y = env.observe(action)?;
        let hr_estimate = estimate_frequency(&env.observe_slow_time(action)?, st.sample_rate, st.band_lo, st.band_hi);

        let pred = predict(&e, &dynamics, &step.labeled("predict"))?;
        let (updated, reinitialized) = match update_weights(&pred, &y, &model, &action) {
            Ok((u, _)) => (u, false),
            Err(Error::FilterDivergence) => {
                reinits += 1;
                events.push(format!("t={t}: filter divergence; ensemble re-initialized from the prior"));
                (s.prior_ensemble(&prior_rng.substream(reinits as u64))?, true)
            }
            Err(err) => return Err(err),
        };
        let ess = updated.ess();
        let mean = updated.mean();
        let cov = updated.covariance();
        let (next, resampled) = resample_if_needed(&updated, s.resample_threshold, &step.labeled("resample"));
        resamples += resampled as usize;
        e = next;

        let truth = env.truth();
        let ig = scores.as_ref().map(|sc| sc.information_gain.clone()).unwrap_or_default();
        records.push(TrackRecord {
            t,
            action,
            true_theta: truth.theta,
            true_z: truth.z,
            true_omega: truth.omega,
            post_mean: [mean[0], mean[1], mean[2]],
            post_cov: [
                [cov[(0, 0)], cov[(0, 1)], cov[(0, 2)]],
                [cov[(1, 0)], cov[(1, 1)], cov[(1, 2)]],
                [cov[(2, 0)], cov[(2, 1)], cov[(2, 2)]],
            ],
            post_mean_theta: mean[0],
            post_std_theta: cov[(0, 0)].max(0.0).sqrt(),
            ess,
            ig_best: ig.iter().copied().reduce(f64::max),
            ig_chosen: ig.get(idx).copied(),
            action_values: ig,
            obs_digest: digest(&y),
            resampled,
            reinitialized,
            angle_error: mean[0] - truth.theta,
            hr_estimate,
        });
    }

    let summary = TrackingSummary {
        angle_rmse: rms(records.iter().map(|r| r.angle_error)),
        hr_rmse: rms(records.iter().map(|r| r.hr_estimate - r.true_omega)),
        hr_mae: records.iter().map(|r| (r.hr_estimate - r.true_omega).abs()).sum::<f64>() / records.len() as f64,
        omega_post_rmse: rms(records.iter().map(|r| r.post_mean[2] - r.true_omega)),
        resamples,
        reinitializations: reinits,
        marginal_argmax_mismatches: mismatches,
    };
    Ok(TrialLog {
        header: RunHeader::bare(rng.seed()),
        policy: s.policy.name().to_string(),
        events,
        records,
        summary,
    })
}

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::{isotropic_log_likelihood, ObservationModel, StreamRng};
use crate::particle::LinearGaussianDynamics;
use crate::rng::{normal, normal_vector};
use crate::RngStream;

/// Target state: angle (rad), depth (m) and Doppler frequency (Hz).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DopplerState {
    pub theta: f64,
    pub z: f64,
    pub omega: f64,
}

impl DopplerState {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.theta, self.z, self.omega])
    }

    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        if v.len() != 3 {
            return Err(Error::dims("Doppler state", 3, v.len()));
        }
        Ok(Self {
            theta: v[0],
            z: v[1],
            omega: v[2],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamParams {
    pub n_theta: usize,
    /// Half field of view (rad).
    pub theta_max: f64,
    /// Receive beam width (rad).
    pub sigma_b: f64,
    /// Transmit beam width (rad).
    pub sigma_tx: f64,
    pub gain: f64,
    pub noise_std: f64,
    /// Focal depth (m).
    pub z_tx: f64,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self {
            n_theta: 64,
            theta_max: PI / 4.0,
            sigma_b: 0.05,
            sigma_tx: 0.08,
            gain: 1.0,
            noise_std: 0.3,
            z_tx: 0.06,
        }
    }
}

/// Angular power Doppler profile
/// `y_j = P exp(-(t_j - theta)^2 / 2 s_b^2) exp(-(a - theta)^2 / 2 s_tx^2) exp(-|z - z_tx| / z_tx)`
/// on a uniform receive grid over `[-theta_max, theta_max]`, plus
/// `N(0, noise_std^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamObservationModel {
    params: BeamParams,
    angles: Vec<f64>,
}

/// `n` equally spaced angles spanning `[-theta_max, theta_max]`.
pub fn candidate_angles(n: usize, theta_max: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| -theta_max + 2.0 * theta_max * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

impl BeamObservationModel {
    pub fn new(params: BeamParams) -> Result<Self> {
        if params.n_theta < 2 {
            return Err(Error::invalid("n_theta", "must be >= 2"));
        }
        if !(params.theta_max > 0.0 && params.theta_max <= PI / 2.0) {
            return Err(Error::invalid("theta_max", "must lie in (0, pi/2]"));
        }
        for (name, v) in [("sigma_b", params.sigma_b), ("sigma_tx", params.sigma_tx), ("z_tx", params.z_tx)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and > 0"));
            }
        }
        if !(params.gain >= 0.0 && params.gain.is_finite()) {
            return Err(Error::invalid("gain", "must be finite and >= 0"));
        }
        if !(params.noise_std >= 0.0 && params.noise_std.is_finite()) {
            return Err(Error::invalid("noise_std", "must be finite and >= 0"));
        }
        let angles = candidate_angles(params.n_theta, params.theta_max);
        Ok(Self { params, angles })
    }

    pub fn params(&self) -> &BeamParams {
        &self.params
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Combined transmit and depth gain for a target at `(theta, z)` under steering `a`.
    pub fn target_gain(&self, theta: f64, z: f64, a: f64) -> f64 {
        let p = &self.params;
        let tx = (-(a - theta).powi(2) / (2.0 * p.sigma_tx * p.sigma_tx)).exp();
        let depth = (-(z - p.z_tx).abs() / p.z_tx).exp();
        p.gain * tx * depth
    }

    pub fn profile_at(&self, theta: f64, z: f64, a: f64) -> DVector<f64> {
        let amp = self.target_gain(theta, z, a);
        let s2 = 2.0 * self.params.sigma_b * self.params.sigma_b;
        DVector::from_iterator(
            self.angles.len(),
            self.angles.iter().map(|t| amp * (-(t - theta).powi(2) / s2).exp()),
        )
    }

    fn check_action(&self, a: f64) -> Result<()> {
        if a.abs() > self.params.theta_max * (1.0 + 1e-12) || !a.is_finite() {
            return Err(Error::invalid("steering angle", format!("{a} outside the field of view")));
        }
        Ok(())
    }
}

impl ObservationModel<f64> for BeamObservationModel {
    type Action = f64;

    fn obs_dim(&self, _: &f64) -> usize {
        self.angles.len()
    }

    fn mean(&self, state: &DVector<f64>, a: &f64) -> DVector<f64> {
        self.profile_at(state[0], state[1], *a)
    }

    fn sample(&self, state: &DVector<f64>, a: &f64, rng: &mut StreamRng) -> DVector<f64> {
        self.mean(state, a) + normal_vector::<f64, _>(rng, self.angles.len()) * self.params.noise_std
    }

    fn log_likelihood(&self, obs: &DVector<f64>, state: &DVector<f64>, a: &f64) -> Result<f64> {
        if self.params.noise_std <= 0.0 {
            return Err(Error::invalid("noise_std", "likelihood needs noise_std > 0"));
        }
        isotropic_log_likelihood(obs, &self.mean(state, a), self.params.noise_std)
    }

    fn additive_noise_cov(&self, _: &f64) -> Option<DMatrix<f64>> {
        let n = self.angles.len();
        (self.params.noise_std > 0.0).then(|| DMatrix::identity(n, n) * self.params.noise_std.powi(2))
    }
}

/// Noise-free profile for `state` under steering angle `action`.
pub fn beam_profile(state: &DopplerState, action: f64, model: &BeamObservationModel) -> Result<DVector<f64>> {
    model.check_action(action)?;
    Ok(model.profile_at(state.theta, state.z, action))
}

/// `beam_profile + N(0, noise_std^2 I)`.
pub fn observe_doppler(
    state: &DopplerState,
    action: f64,
    model: &BeamObservationModel,
    rng: &RngStream,
) -> Result<DVector<f64>> {
    let mean = beam_profile(state, action, model)?;
    let n = mean.len();
    Ok(mean + normal_vector::<f64, _>(&mut rng.rng(), n) * model.params.noise_std)
}

/// Folds `v` into `[lo, hi]` by mirror reflection at the bounds.
pub fn reflect_into(v: f64, lo: f64, hi: f64) -> f64 {
    if (lo..=hi).contains(&v) {
        return v;
    }
    let width = hi - lo;
    if width.is_nan() || width <= 0.0 || !v.is_finite() {
        return v.clamp(lo, hi);
    }
    let m = (v - lo).rem_euclid(2.0 * width);
    if m <= width {
        lo + m
    } else {
        hi - (m - width)
    }
}

/// One linear-Gaussian step; the angle is reflected into `[-theta_max, theta_max]`
/// and depth at zero.
pub fn step_target(
    state: &DopplerState,
    dynamics: &LinearGaussianDynamics<f64>,
    theta_max: f64,
    rng: &RngStream,
) -> Result<DopplerState> {
    if dynamics.dim() != 3 {
        return Err(Error::dims("Doppler dynamics", 3, dynamics.dim()));
    }
    let mut next = DopplerState::from_vector(&dynamics.step(&state.to_vector(), &mut rng.rng()))?;
    next.theta = reflect_into(next.theta, -theta_max, theta_max);
    next.z = next.z.abs();
    Ok(next)
}

/// Slow-time signal used for the heart-rate proxy: `n_samples` samples at
/// `sample_rate` Hz of a sinusoid at the Doppler frequency whose amplitude is
/// the beam gain on the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlowTimeParams {
    pub n_samples: usize,
    pub sample_rate: f64,
    pub band_lo: f64,
    pub band_hi: f64,
}

impl Default for SlowTimeParams {
    fn default() -> Self {
        Self {
            n_samples: 64,
            sample_rate: 16.0,
            band_lo: 0.5,
            band_hi: 3.0,
        }
    }
}

/// Frequency in `[lo, hi]` maximizing the periodogram of `samples`,
/// searched on a 0.005 Hz grid. Ties go to the lowest frequency.
pub fn estimate_frequency(samples: &DVector<f64>, sample_rate: f64, lo: f64, hi: f64) -> f64 {
    let steps = ((hi - lo) / 0.005).round().max(0.0) as usize;
    let mut best = (lo, f64::NEG_INFINITY);
    for i in 0..=steps {
        let f = lo + (hi - lo) * i as f64 / steps.max(1) as f64;
        let w = 2.0 * PI * f / sample_rate;
        let (re, im) = samples
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (k, s)| (re + s * (w * k as f64).cos(), im - s * (w * k as f64).sin()));
        let p = re * re + im * im;
        if p > best.1 {
            best = (f, p);
        }
    }
    best.0
}

/// Single-owner simulation of a moving Doppler target.
#[derive(Clone, Debug)]
pub struct DopplerEnvironment {
    model: BeamObservationModel,
    dynamics: LinearGaussianDynamics<f64>,
    slow_time: SlowTimeParams,
    state: DopplerState,
    rng: RngStream,
    t: usize,
    history: Vec<DopplerState>,
}

impl DopplerEnvironment {
    pub fn new(
        model: BeamObservationModel,
        dynamics: LinearGaussianDynamics<f64>,
        slow_time: SlowTimeParams,
        initial: DopplerState,
        rng: RngStream,
    ) -> Result<Self> {
        if dynamics.dim() != 3 {
            return Err(Error::dims("Doppler dynamics", 3, dynamics.dim()));
        }
        if initial.theta.abs() > model.params.theta_max {
            return Err(Error::invalid("initial theta", "outside the field of view"));
        }
        Ok(Self {
            model,
            dynamics,
            slow_time,
            state: initial,
            rng,
            t: 0,
            history: vec![initial],
        })
    }

    pub fn model(&self) -> &BeamObservationModel {
        &self.model
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    /// Ground truth, for logging and scoring only.
    pub fn truth(&self) -> DopplerState {
        self.state
    }

    pub fn history(&self) -> &[DopplerState] {
        &self.history
    }

    pub fn advance(&mut self) -> Result<()> {
        self.t += 1;
        let r = self.rng.labeled("motion").substream(self.t as u64);
        self.state = step_target(&self.state, &self.dynamics, self.model.params.theta_max, &r)?;
        self.history.push(self.state);
        Ok(())
    }

    pub fn observe(&self, action: f64) -> Result<DVector<f64>> {
        let r = self.rng.labeled("observe").substream(self.t as u64);
        observe_doppler(&self.state, action, &self.model, &r)
    }

    /// Slow-time samples at the current step for the heart-rate proxy.
    pub fn observe_slow_time(&self, action: f64) -> Result<DVector<f64>> {
        self.model.check_action(action)?;
        let mut r = self.rng.labeled("slow-time").substream(self.t as u64).rng();
        let amp = self.model.target_gain(self.state.theta, self.state.z, action);
        let phase = 2.0 * PI * rand::Rng::random::<f64>(&mut r);
        let p = &self.slow_time;
        let w = 2.0 * PI * self.state.omega / p.sample_rate;
        Ok(DVector::from_fn(p.n_samples, |k, _| {
            amp * (w * k as f64 + phase).cos() + self.model.params.noise_std * normal::<f64, _>(&mut r)
        }))
    }

    pub fn slow_time_params(&self) -> &SlowTimeParams {
        &self.slow_time
    }

    /// Candidate nearest the true angle; ties go to the lowest index.
    pub fn oracle_action(&self, candidates: &[f64]) -> Result<f64> {
        let mut best: Option<(f64, f64)> = None;
        for &c in candidates {
            let d = (c - self.state.theta).abs();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((c, d));
            }
        }
        best.map(|b| b.0).ok_or(Error::Empty("candidate actions"))
    }

    /// Ground-truth trajectory as CSV with columns `t, theta, z, omega`.
    pub fn write_truth_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "theta", "z", "omega"])?;
        for (t, s) in self.history.iter().enumerate() {
            out.write_record([t.to_string(), s.theta.to_string(), s.z.to_string(), s.omega.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(noise: f64) -> BeamObservationModel {
        BeamObservationModel::new(BeamParams {
            noise_std: noise,
            ..BeamParams::default()
        })
        .unwrap()
    }

    #[test]
    fn on_target_argmax_is_nearest_grid_angle() {
        let m = model(0.3);
        for theta in [-0.5, 0.013, 0.3, 0.7] {
            let s = DopplerState { theta, z: 0.05, omega: 1.0 };
            let p = beam_profile(&s, theta, &m).unwrap();
            let nearest = (0..m.angles().len())
                .min_by(|&a, &b| (m.angles()[a] - theta).abs().total_cmp(&(m.angles()[b] - theta).abs()))
                .unwrap();
            assert_eq!(p.imax(), nearest);
        }
    }

    #[test]
    fn off_target_is_invisible() {
        let m = model(0.3);
        let s = DopplerState { theta: 0.0, z: 0.06, omega: 1.0 };
        let p = beam_profile(&s, 5.0 * 0.08, &m).unwrap();
        assert!(p.max() < (-12.5f64).exp() * 1.0000001);
    }

    #[test]
    fn exact_value_on_grid() {
        // grid point at exactly 0.1 rad: theta_max chosen so that 0.1 = -t + 2t * 40/63
        let theta_max = 0.1 / (80.0 / 63.0 - 1.0);
        let m = BeamObservationModel::new(BeamParams {
            theta_max,
            gain: 2.5,
            ..BeamParams::default()
        })
        .unwrap();
        assert!((m.angles()[40] - 0.1).abs() < 1e-15);
        let s = DopplerState { theta: 0.1, z: 0.06, omega: 1.0 };
        assert!((beam_profile(&s, 0.1, &m).unwrap()[40] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn steering_outside_fov_rejected() {
        let m = model(0.3);
        let s = DopplerState { theta: 0.0, z: 0.06, omega: 1.0 };
        assert!(beam_profile(&s, 1.0, &m).is_err());
    }

    #[test]
    fn noiseless_observation_is_profile() {
        let m = model(0.0);
        let s = DopplerState { theta: 0.2, z: 0.07, omega: 1.0 };
        let a = observe_doppler(&s, 0.1, &m, &RngStream::new(1)).unwrap();
        assert_eq!(a, beam_profile(&s, 0.1, &m).unwrap());
        assert!(m.log_likelihood(&a, &s.to_vector(), &0.1).is_err());
    }

    #[test]
    fn observations_are_reproducible_and_centered() {
        let m = model(0.3);
        let s = DopplerState { theta: 0.2, z: 0.06, omega: 1.0 };
        let r = RngStream::new(3);
        assert_eq!(observe_doppler(&s, 0.2, &m, &r).unwrap(), observe_doppler(&s, 0.2, &m, &r).unwrap());
        let n = 2000;
        let mut acc = DVector::zeros(64);
        for i in 0..n {
            acc += observe_doppler(&s, 0.2, &m, &r.substream(i)).unwrap();
        }
        let mean = acc / n as f64;
        let tol = 3.0 * 0.3 / (n as f64).sqrt();
        let dev = mean - beam_profile(&s, 0.2, &m).unwrap();
        // 64 coordinates at 3 SE: allow the rare excursion
        assert!(dev.iter().filter(|d| d.abs() > tol).count() <= 2, "{}", dev.amax());
        assert!(dev.amax() < 4.5 * 0.3 / (n as f64).sqrt());
    }

    #[test]
    fn reflection() {
        assert_eq!(reflect_into(0.3, -1.0, 1.0), 0.3);
        assert!((reflect_into(1.2, -1.0, 1.0) - 0.8).abs() < 1e-15);
        assert!((reflect_into(-1.5, -1.0, 1.0) + 0.5).abs() < 1e-15);
        assert!((reflect_into(3.5, -1.0, 1.0) + 0.5).abs() < 1e-15);
        let d = LinearGaussianDynamics::new(
            DMatrix::identity(3, 3),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1e-6, 0.0, 0.0])),
        )
        .unwrap();
        let s = DopplerState { theta: PI / 4.0 + 0.01, z: 0.05, omega: 1.0 };
        for i in 0..20 {
            let n = step_target(&s, &d, PI / 4.0, &RngStream::new(i)).unwrap();
            assert!(n.theta.abs() <= PI / 4.0);
        }
    }

    #[test]
    fn identity_without_noise_keeps_state() {
        let s = DopplerState { theta: 0.2, z: 0.05, omega: 1.3 };
        let n = step_target(&s, &LinearGaussianDynamics::identity(3), PI / 4.0, &RngStream::new(1)).unwrap();
        assert_eq!(n, s);
    }

    #[test]
    fn frequency_estimate_recovers_clean_tone() {
        let f = 1.37;
        let x = DVector::from_fn(64, |k, _| (2.0 * PI * f * k as f64 / 16.0 + 0.4).cos());
        assert!((estimate_frequency(&x, 16.0, 0.5, 3.0) - f).abs() < 0.02);
    }

    #[test]
    fn environment_oracle_and_truth_csv() {
        let m = model(0.3);
        let d = LinearGaussianDynamics::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3) * 1e-4).unwrap();
        let s = DopplerState { theta: 0.1, z: 0.06, omega: 1.2 };
        let mut env = DopplerEnvironment::new(m, d, SlowTimeParams::default(), s, RngStream::new(4)).unwrap();
        assert_eq!(env.oracle_action(&[-0.5, 0.0, 0.15, 0.5]).unwrap(), 0.15);
        env.advance().unwrap();
        env.advance().unwrap();
        let mut buf = Vec::new();
        env.write_truth_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,theta,z,omega\n0,0.1,0.06,1.2\n"));
        assert_eq!(text.lines().count(), 4);
    }
}

//! Oracle checks behind `cogsono validate`. Each `*_metrics` function returns
//! raw discrepancies so callers can apply their own tolerances;
//! [`run_validation`] applies the default ones.

use std::fmt::Write as _;

use nalgebra::{dvector, DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::agent::{score_actions, select_action, ActionSet, SeparationSettings, SourcePrior};
use crate::diffusion::{
    dps_sample, reverse_sample, tweedie_denoise, DiffusionSchedule, GmmScore, GuidanceTarget,
    LinearGaussianLikelihood, LinearOperator,
};
use crate::entropy::{gaussian_entropy_from_samples, gmm_entropy_isotropic, gmm_entropy_variational, MarginalEntropyModel};
use crate::env::{BeamObservationModel, BeamParams};
use crate::error::Result;
use crate::gaussian::GaussianDensity;
use crate::gmm::GmmDensity;
use crate::observation::LinearObservation;
use crate::oracle::{
    gaussian_entropy_closed, gaussian_tweedie_1d, gmm_tweedie_quadrature_1d, kalman_filter_1d, linear_gaussian_posterior,
};
use crate::particle::{predict, systematic_indices, update_weights, LinearGaussianDynamics, ParticleEnsemble};
use crate::rng::{normal, normal_vector};
use crate::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub value: f64,
    /// `"<="` or `">="`.
    pub relation: &'static str,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(criterion: u8, name: &str, value: f64, limit: f64) -> Self {
        Self {
            criterion,
            name: name.to_string(),
            value,
            relation: "<=",
            limit,
            passed: value <= limit,
        }
    }

    pub fn at_least(criterion: u8, name: &str, value: f64, limit: f64) -> Self {
        Self {
            criterion,
            name: name.to_string(),
            value,
            relation: ">=",
            limit,
            passed: value >= limit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn new(checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(5);
        let _ = writeln!(s, "{:>2}  {:<w$}  {:>12}  {:>15}  result", "#", "check", "value", "limit");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:>2}  {:<w$}  {:>12.3e}  {:>2} {:>12.3e}  {}",
                c.criterion,
                c.name,
                c.value,
                c.relation,
                c.limit,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KalmanMetrics {
    /// Largest `|m_pf - m_kf|` over steps in Monte-Carlo standard errors,
    /// with the filter estimate averaged over independent runs.
    pub max_mean_z: f64,
    /// Same for the posterior variance.
    pub max_var_z: f64,
    /// Mean squared per-run z-score; near 1 when the standard errors are
    /// calibrated.
    pub mean_sq_z: f64,
}

/// Genealogy-based variance estimate of a weighted average: particles are
/// grouped by their time-0 ancestor and `sum_E (sum_{i in E} w_i c_i)^2`
/// is returned, with `c_i` the centred test function.
fn genealogy_variance(weights: &[f64], centred: &[f64], eve: &[usize]) -> f64 {
    let mut groups = vec![0.0; eve.len()];
    for ((w, c), e) in weights.iter().zip(centred).zip(eve) {
        groups[*e] += w * c;
    }
    groups.iter().map(|g| g * g).sum()
}

/// Bootstrap filter against the exact Kalman filter on
/// `x' = 0.9 x + N(0, 0.5)`, `y = x + N(0, 1)`, prior `N(0, 1)`, resampling
/// systematically when `ESS < N / 2`.
pub fn kalman_metrics(n_particles: usize, seeds: &[u64], steps: usize) -> Result<KalmanMetrics> {
    let (a, q, r, m0, p0): (f64, f64, f64, f64, f64) = (0.9, 0.5, 1.0, 0.0, 1.0);
    let dynamics = LinearGaussianDynamics::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, q))?;
    let model = LinearObservation::new(DMatrix::from_element(1, 1, 1.0), r.sqrt())?;
    let mut truth_rng = RngStream::new(0).labeled("kalman truth").rng();
    let mut x = m0 + p0.sqrt() * normal::<f64, _>(&mut truth_rng);
    let ys: Vec<f64> = (0..steps)
        .map(|_| {
            x = a * x + q.sqrt() * normal::<f64, _>(&mut truth_rng);
            x + r.sqrt() * normal::<f64, _>(&mut truth_rng)
        })
        .collect();
    let exact = kalman_filter_1d(a, q, r, m0, p0, &ys);
    // per step: sums over runs of (m, var(m), P, var(P))
    let mut acc = vec![[0.0; 4]; steps];
    let mut sq_z = 0.0;
    for &seed in seeds {
        let rng = RngStream::new(seed);
        let init = rng.labeled("init");
        let states = (0..n_particles)
            .map(|i| dvector![m0 + p0.sqrt() * normal::<f64, _>(&mut init.substream(i as u64).rng())])
            .collect();
        let mut e = ParticleEnsemble::uniform(states)?;
        let mut eve: Vec<usize> = (0..n_particles).collect();
        for (t, y) in ys.iter().enumerate() {
            let step = rng.labeled("step").substream(t as u64);
            e = predict(&e, &dynamics, &step.labeled("predict"))?;
            e = update_weights(&e, &dvector![*y], &model, &())?.0;
            let (m, p) = (e.mean()[0], e.covariance()[(0, 0)]);
            let xs: Vec<f64> = e.states().iter().map(|s| s[0]).collect();
            let c_mean: Vec<f64> = xs.iter().map(|x| x - m).collect();
            let c_var: Vec<f64> = xs.iter().map(|x| (x - m).powi(2) - p).collect();
            let v_m = genealogy_variance(e.weights(), &c_mean, &eve);
            let v_p = genealogy_variance(e.weights(), &c_var, &eve);
            acc[t][0] += m;
            acc[t][1] += v_m;
            acc[t][2] += p;
            acc[t][3] += v_p;
            sq_z += (m - exact[t].0).powi(2) / v_m + (p - exact[t].1).powi(2) / v_p;
            if e.ess() < 0.5 * n_particles as f64 {
                let u: f64 = step.labeled("resample").rng().random();
                let idx = systematic_indices(e.weights(), u);
                eve = idx.iter().map(|&i| eve[i]).collect();
                e = ParticleEnsemble::uniform(idx.iter().map(|&i| e.states()[i].clone()).collect())?;
            }
        }
    }
    let k = seeds.len() as f64;
    let mut out = KalmanMetrics {
        max_mean_z: 0.0,
        max_var_z: 0.0,
        mean_sq_z: sq_z / (2.0 * k * steps as f64),
    };
    for (s, (km, kp)) in acc.iter().zip(&exact) {
        out.max_mean_z = out.max_mean_z.max((s[0] / k - km).abs() / (s[1].sqrt() / k));
        out.max_var_z = out.max_var_z.max((s[2] / k - kp).abs() / (s[3].sqrt() / k));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntropyMetrics {
    pub sample_error_d1: f64,
    pub sample_error_d3: f64,
    /// Single-component mixture against the Gaussian closed form.
    pub single_component_error: f64,
    /// Isotropic shortcut against the general pairwise-KL bound.
    pub isotropic_vs_general_error: f64,
    /// Well-separated equal-weight pair against `H_gauss + log 2`.
    pub separated_pair_error: f64,
}

pub fn entropy_metrics(rng: &RngStream) -> Result<EntropyMetrics> {
    let sample_err = |d: usize| -> Result<f64> {
        let mut r = rng.labeled("samples").substream(d as u64).rng();
        let xs: Vec<DVector<f64>> = (0..10_000).map(|_| normal_vector::<f64, _>(&mut r, d)).collect();
        Ok((gaussian_entropy_from_samples(&xs)? - gaussian_entropy_closed(d, 0.0)).abs())
    };
    let cov = DMatrix::<f64>::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
    let single = GmmDensity::single(GaussianDensity::new(dvector![0.5, -1.0, 2.0], cov.clone())?);
    let closed = gaussian_entropy_closed(3, cov.determinant().ln());
    let means = vec![dvector![0.0, 0.0], dvector![1.0, -0.5], dvector![-0.7, 2.0], dvector![0.3, 0.3]];
    let weights = vec![0.1, 0.4, 0.3, 0.2];
    let sigma: f64 = 0.8;
    let general = gmm_entropy_variational(&GmmDensity::isotropic(means.clone(), weights.clone(), sigma * sigma)?)?;
    let iso = gmm_entropy_isotropic(&means, &weights, sigma)?;
    let far = gmm_entropy_variational(&GmmDensity::isotropic(
        vec![dvector![-50.0, 0.0], dvector![50.0, 0.0]],
        vec![0.5, 0.5],
        1.0,
    )?)?;
    Ok(EntropyMetrics {
        sample_error_d1: sample_err(1)?,
        sample_error_d3: sample_err(3)?,
        single_component_error: (gmm_entropy_variational(&single)? - closed).abs(),
        isotropic_vs_general_error: (general - iso).abs(),
        separated_pair_error: (far - (gaussian_entropy_closed(2, 0.0) + 2f64.ln())).abs(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PriorFidelityMetrics {
    pub weight_error: f64,
    pub mean_error: f64,
}

/// Unguided sampling of `0.3 N(-2, 0.09) + 0.7 N(2, 0.09)`; samples are
/// split at zero.
pub fn prior_fidelity_metrics(n: usize, rng: &RngStream) -> Result<PriorFidelityMetrics> {
    let prior = GmmDensity::isotropic(vec![dvector![-2.0], dvector![2.0]], vec![0.3, 0.7], 0.09)?;
    let xs = reverse_sample(&GmmScore::new(&prior), &DiffusionSchedule::standard(), n, rng)?;
    let (neg, pos): (Vec<f64>, Vec<f64>) = xs.iter().map(|x| x[0]).partition(|x| *x < 0.0);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(PriorFidelityMetrics {
        weight_error: (neg.len() as f64 / n as f64 - 0.3).abs(),
        mean_error: (mean(&neg) + 2.0).abs().max((mean(&pos) - 2.0).abs()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TweedieMetrics {
    pub gaussian_error: f64,
    pub gmm_error: f64,
}

/// Tweedie denoising at ten schedule steps against closed form (Gaussian
/// prior) and quadrature (two-component prior).
pub fn tweedie_metrics() -> Result<TweedieMetrics> {
    let schedule = DiffusionSchedule::standard();
    let gauss = GmmScore::new(&GmmDensity::single(GaussianDensity::isotropic(dvector![0.7], 0.4)?));
    let (w, m, v) = ([0.3, 0.7], [-1.0, 1.5], [0.2, 0.5]);
    let mix = GmmDensity::new(
        w.to_vec(),
        vec![
            GaussianDensity::isotropic(dvector![m[0]], v[0])?,
            GaussianDensity::isotropic(dvector![m[1]], v[1])?,
        ],
    )?;
    let mix_score = GmmScore::new(&mix);
    let mut out = TweedieMetrics {
        gaussian_error: 0.0,
        gmm_error: 0.0,
    };
    for t in (1..=10).map(|i| i * 100) {
        let ab = schedule.alpha_bar(t);
        for x_t in [-1.7, 0.2, 1.1] {
            let g = tweedie_denoise(&dvector![x_t], t, &gauss, &schedule)?[0];
            out.gaussian_error = out.gaussian_error.max((g - gaussian_tweedie_1d(0.7, 0.4, x_t, ab)).abs());
            let q = gmm_tweedie_quadrature_1d(&w, &m, &v, x_t, ab, 20_000);
            let s = tweedie_denoise(&dvector![x_t], t, &mix_score, &schedule)?[0];
            out.gmm_error = out.gmm_error.max((s - q).abs());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DpsMetrics {
    /// Largest `|mean - exact mean| / exact std` over seeds.
    pub mean_error: f64,
    /// Largest `|std / exact std - 1|` over seeds.
    pub std_ratio_error: f64,
}

/// Prior `N(0, 1)`, observation `y = x + N(0, 4)` at `y = 1.5`.
pub fn dps_metrics(n: usize, seeds: &[u64]) -> Result<DpsMetrics> {
    let score = GmmScore::new(&GmmDensity::single(GaussianDensity::standard(1)));
    let lik = LinearGaussianLikelihood::new(LinearOperator::Identity(1), 2.0)?;
    let y = dvector![1.5];
    let (pm, pc) = linear_gaussian_posterior(
        &dvector![0.0],
        &DMatrix::identity(1, 1),
        &DMatrix::identity(1, 1),
        &DMatrix::from_element(1, 1, 4.0),
        &y,
    )?;
    let sd = pc[(0, 0)].sqrt();
    let mut out = DpsMetrics {
        mean_error: 0.0,
        std_ratio_error: 0.0,
    };
    for &seed in seeds {
        let xs = dps_sample(&score, &lik, &y, &DiffusionSchedule::standard(), 1.0, n, &RngStream::new(seed))?;
        let (m, s) = mean_std(xs.iter().map(|x| x[0]));
        out.mean_error = out.mean_error.max((m - pm[0]).abs() / sd);
        out.std_ratio_error = out.std_ratio_error.max((s / sd - 1.0).abs());
    }
    Ok(out)
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    (m, (v.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeparationMetrics {
    pub x_mean_error: f64,
    pub h_mean_error: f64,
}

/// Gaussian sources `x ~ N(2, 0.25)`, `h ~ N(0, 0.25)`, `y = x + h + N(0, 0.04)`
/// observed at `y = 3`; errors are in units of the exact posterior std.
pub fn separation_metrics(n: usize, target: GuidanceTarget, rng: &RngStream) -> Result<SeparationMetrics> {
    let s = SeparationSettings {
        dim: 1,
        x_prior: SourcePrior { mean: 2.0, std: 0.5 },
        h_prior: SourcePrior { mean: 0.0, std: 0.5 },
        rho: 0.2,
        n_samples: n,
        guidance_target: target,
        observation: Some(vec![3.0]),
        ..SeparationSettings::default()
    };
    let log = crate::agent::run_separation(&s, rng)?;
    let r = &log.records[0];
    let (m, p) = linear_gaussian_posterior(
        &dvector![2.0, 0.0],
        &DMatrix::from_diagonal(&dvector![0.25, 0.25]),
        &DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        &DMatrix::from_element(1, 1, 0.04),
        &dvector![3.0],
    )?;
    Ok(SeparationMetrics {
        x_mean_error: (r.mean_x - m[0]).abs() / p[(0, 0)].sqrt(),
        h_mean_error: (r.mean_h - m[1]).abs() / p[(1, 1)].sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ActionSanityMetrics {
    pub evaluations: usize,
    /// Evaluations in which the far candidate scored strictly lowest.
    pub far_lowest: usize,
    pub far_selected: usize,
    /// Largest `|IG|` of any candidate under a zero-gain beam.
    pub zero_gain_ig: f64,
}

/// Two particle clusters at `theta = -0.3` and `0.3`; candidates are the
/// two cluster angles and a far angle `0.75` that sees neither.
pub fn action_sanity_metrics(evaluations: usize) -> Result<ActionSanityMetrics> {
    let candidates = ActionSet::new(vec![-0.3, 0.3, 0.75])?;
    let dynamics = LinearGaussianDynamics::new(
        DMatrix::identity(3, 3),
        DMatrix::from_diagonal(&dvector![0.01f64.powi(2), 0.0005f64.powi(2), 0.01f64.powi(2)]),
    )?;
    let model = BeamObservationModel::new(BeamParams::default())?;
    let silent = BeamObservationModel::new(BeamParams {
        gain: 0.0,
        ..BeamParams::default()
    })?;
    let entropy = MarginalEntropyModel::GaussianSampleCovariance;
    let mut out = ActionSanityMetrics {
        evaluations,
        far_lowest: 0,
        far_selected: 0,
        zero_gain_ig: 0.0,
    };
    for seed in 0..evaluations as u64 {
        let rng = RngStream::new(seed);
        let init = rng.labeled("particles");
        let states = (0..512)
            .map(|i| {
                let mut r = init.substream(i).rng();
                let centre = if i % 2 == 0 { -0.3 } else { 0.3 };
                dvector![
                    centre + 0.02 * normal::<f64, _>(&mut r),
                    0.06 + 0.002 * normal::<f64, _>(&mut r),
                    1.2 + 0.1 * normal::<f64, _>(&mut r)
                ]
            })
            .collect();
        let e = ParticleEnsemble::uniform(states)?;
        let scores = score_actions(&e, &dynamics, &model, &candidates, &entropy, 64, &rng.labeled("score"))?;
        let ig = &scores.information_gain;
        if ig[2] < ig[0] && ig[2] < ig[1] {
            out.far_lowest += 1;
        }
        if select_action(ig)? == 2 {
            out.far_selected += 1;
        }
        let zero = score_actions(&e, &dynamics, &silent, &candidates, &entropy, 64, &rng.labeled("silent"))?;
        for v in zero.information_gain {
            out.zero_gain_ig = out.zero_gain_ig.max(v.abs());
        }
    }
    Ok(out)
}

/// Every analytic-oracle check at default sizes and tolerances.
pub fn run_validation() -> Result<ValidationReport> {
    let mut checks = Vec::new();
    let k = kalman_metrics(10_000, &[0, 1, 2, 3, 4], 50)?;
    checks.push(Check::at_most(1, "kalman mean (MC std errors)", k.max_mean_z, 3.0));
    checks.push(Check::at_most(1, "kalman variance (MC std errors)", k.max_var_z, 3.0));
    checks.push(Check::at_most(1, "kalman std error calibration", (k.mean_sq_z - 1.0).abs(), 0.5));

    let e = entropy_metrics(&RngStream::new(0))?;
    checks.push(Check::at_most(2, "sample entropy d=1 (nats)", e.sample_error_d1, 0.05));
    checks.push(Check::at_most(2, "sample entropy d=3 (nats)", e.sample_error_d3, 0.05));
    checks.push(Check::at_most(2, "mixture K=1 vs Gaussian", e.single_component_error, 1e-10));
    checks.push(Check::at_most(2, "isotropic vs general mixture", e.isotropic_vs_general_error, 1e-10));
    checks.push(Check::at_most(2, "separated pair vs H + log 2", e.separated_pair_error, 1e-6));

    let p = prior_fidelity_metrics(10_000, &RngStream::new(0))?;
    checks.push(Check::at_most(3, "prior sampling weight", p.weight_error, 0.03));
    checks.push(Check::at_most(3, "prior sampling means", p.mean_error, 0.05));

    let t = tweedie_metrics()?;
    checks.push(Check::at_most(4, "tweedie gaussian", t.gaussian_error, 1e-8));
    checks.push(Check::at_most(4, "tweedie mixture vs quadrature", t.gmm_error, 1e-4));

    let d = dps_metrics(2000, &[0, 1, 2])?;
    checks.push(Check::at_most(5, "dps mean (posterior stds)", d.mean_error, 0.1));
    checks.push(Check::at_most(5, "dps std ratio", d.std_ratio_error, 0.2));

    let s = separation_metrics(2000, GuidanceTarget::Observed, &RngStream::new(0))?;
    checks.push(Check::at_most(6, "separation x mean (posterior stds)", s.x_mean_error, 0.1));
    checks.push(Check::at_most(6, "separation h mean (posterior stds)", s.h_mean_error, 0.1));

    let a = action_sanity_metrics(100)?;
    checks.push(Check::at_least(7, "far candidate lowest (fraction)", a.far_lowest as f64 / a.evaluations as f64, 0.95));
    checks.push(Check::at_most(7, "far candidate selected (count)", a.far_selected as f64, 0.0));
    checks.push(Check::at_most(7, "zero-gain |IG| (nats)", a.zero_gain_ig, 0.05));
    Ok(ValidationReport::new(checks))
}

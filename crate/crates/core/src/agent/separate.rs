use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::log::{CsvRecord, RunHeader, TrialLog};
use super::subsample::DiffusionSettings;
use crate::diffusion::{joint_separate, GmmScore, GuidanceTarget};
use crate::error::{Error, Result};
use crate::gaussian::GaussianDensity;
use crate::gmm::GmmDensity;
use crate::rng::normal_vector;
use crate::RngStream;

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Isotropic Gaussian prior `N(mean 1, std^2 I)` of one source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcePrior {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationSettings {
    pub dim: usize,
    pub x_prior: SourcePrior,
    pub h_prior: SourcePrior,
    pub rho: f64,
    pub n_samples: usize,
    pub diffusion: DiffusionSettings,
    pub guidance_target: GuidanceTarget,
    /// Fixed observation; when absent, sources are drawn from the priors and
    /// `y = x + h + rho n` is simulated.
    pub observation: Option<Vec<f64>>,
}

impl Default for SeparationSettings {
    fn default() -> Self {
        Self {
            dim: 1,
            x_prior: SourcePrior { mean: 2.0, std: 0.5 },
            h_prior: SourcePrior { mean: 0.0, std: 0.5 },
            rho: 0.2,
            n_samples: 2000,
            diffusion: DiffusionSettings::default(),
            guidance_target: GuidanceTarget::Observed,
            observation: None,
        }
    }
}

impl SeparationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(config_err("dim", "must be >= 1"));
        }
        for (name, p) in [("x_prior.std", self.x_prior), ("h_prior.std", self.h_prior)] {
            if !(p.std > 0.0 && p.std.is_finite() && p.mean.is_finite()) {
                return Err(config_err(name, "std must be finite and > 0"));
            }
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(config_err("rho", "must be finite and > 0"));
        }
        if self.n_samples < 2 {
            return Err(config_err("n_samples", "must be >= 2"));
        }
        if let Some(y) = &self.observation {
            if y.len() != self.dim {
                return Err(config_err("observation", format!("needs {} entries", self.dim)));
            }
        }
        self.diffusion.validate()
    }

    /// Exact posterior mean and std of `(x, h)` given `y` per coordinate.
    pub fn analytic_posterior(&self, y: f64) -> ((f64, f64), (f64, f64)) {
        let (vx, vh) = (self.x_prior.std.powi(2), self.h_prior.std.powi(2));
        let sy = vx + vh + self.rho * self.rho;
        let innov = y - self.x_prior.mean - self.h_prior.mean;
        (
            (self.x_prior.mean + vx / sy * innov, (vx - vx * vx / sy).sqrt()),
            (self.h_prior.mean + vh / sy * innov, (vh - vh * vh / sy).sqrt()),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationRecord {
    pub index: usize,
    pub y: f64,
    pub true_x: Option<f64>,
    pub true_h: Option<f64>,
    pub mean_x: f64,
    pub mean_h: f64,
    pub std_x: f64,
    pub std_h: f64,
    pub analytic_mean_x: f64,
    pub analytic_mean_h: f64,
    pub analytic_std_x: f64,
    pub analytic_std_h: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CsvRecord for SeparationRecord {
    fn csv_header() -> &'static [&'static str] {
        &[
            "index",
            "y",
            "true_x",
            "true_h",
            "mean_x",
            "mean_h",
            "std_x",
            "std_h",
            "analytic_mean_x",
            "analytic_mean_h",
            "analytic_std_x",
            "analytic_std_h",
        ]
    }

    fn csv_row(&self) -> Vec<String> {
        vec![
            self.index.to_string(),
            self.y.to_string(),
            opt(self.true_x),
            opt(self.true_h),
            self.mean_x.to_string(),
            self.mean_h.to_string(),
            self.std_x.to_string(),
            self.std_h.to_string(),
            self.analytic_mean_x.to_string(),
            self.analytic_mean_h.to_string(),
            self.analytic_std_x.to_string(),
            self.analytic_std_h.to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationSummary {
    pub guidance_target: GuidanceTarget,
    /// Largest `|sample mean - exact mean| / exact std` over coordinates.
    pub max_mean_error_x: f64,
    pub max_mean_error_h: f64,
}

fn stats(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    (m, (v.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Two-source separation `y = x + h + n` with Gaussian source priors,
/// compared against the exact linear-Gaussian posterior.
pub fn run_separation(s: &SeparationSettings, rng: &RngStream) -> Result<TrialLog<SeparationRecord, SeparationSummary>> {
    s.validate()?;
    let d = s.dim;
    let prior = |p: SourcePrior| -> Result<GmmScore<f64>> {
        let g = GaussianDensity::isotropic(DVector::from_element(d, p.mean), p.std * p.std)?;
        Ok(GmmScore::new(&GmmDensity::single(g)))
    };
    let (score_x, score_h) = (prior(s.x_prior)?, prior(s.h_prior)?);
    let (y, truth) = match &s.observation {
        Some(v) => (DVector::from_vec(v.clone()), None),
        None => {
            let mut r = rng.labeled("truth").rng();
            let x = DVector::from_element(d, s.x_prior.mean) + normal_vector::<f64, _>(&mut r, d) * s.x_prior.std;
            let h = DVector::from_element(d, s.h_prior.mean) + normal_vector::<f64, _>(&mut r, d) * s.h_prior.std;
            let y = &x + &h + normal_vector::<f64, _>(&mut r, d) * s.rho;
            (y, Some((x, h)))
        }
    };
    let schedule = s.diffusion.schedule()?;
    let pairs = joint_separate(
        &score_x,
        &score_h,
        &y,
        s.rho,
        &schedule,
        s.n_samples,
        &rng.labeled("sampler"),
        s.guidance_target,
    )?;
    let mut records = Vec::with_capacity(d);
    for i in 0..d {
        let (mx, sx) = stats(pairs.iter().map(|p| p.0[i]));
        let (mh, sh) = stats(pairs.iter().map(|p| p.1[i]));
        let ((ax, asx), (ah, ash)) = s.analytic_posterior(y[i]);
        records.push(SeparationRecord {
            index: i,
            y: y[i],
            true_x: truth.as_ref().map(|t| t.0[i]),
            true_h: truth.as_ref().map(|t| t.1[i]),
            mean_x: mx,
            mean_h: mh,
            std_x: sx,
            std_h: sh,
            analytic_mean_x: ax,
            analytic_mean_h: ah,
            analytic_std_x: asx,
            analytic_std_h: ash,
        });
    }
    let summary = SeparationSummary {
        guidance_target: s.guidance_target,
        max_mean_error_x: records
            .iter()
            .map(|r| (r.mean_x - r.analytic_mean_x).abs() / r.analytic_std_x)
            .fold(0.0, f64::max),
        max_mean_error_h: records
            .iter()
            .map(|r| (r.mean_h - r.analytic_mean_h).abs() / r.analytic_std_h)
            .fold(0.0, f64::max),
    };
    Ok(TrialLog {
        header: RunHeader::bare(rng.seed()),
        policy: "joint_separation".to_string(),
        events: Vec::new(),
        records,
        summary,
    })
}

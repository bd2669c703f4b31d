use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::log::{digest, CsvRecord, RunHeader, TrialLog};
use super::PolicyKind;
use crate::diffusion::{dps_sample, DiffusionSchedule, GmmScore, LinearGaussianLikelihood, LinearOperator};
use crate::env::{apply_mask_noisy, sample_sequence, ImageSequencePrior, SubsamplingMask, SyntheticPriorParams};
use crate::error::{Error, Result};
use crate::gaussian::{log_det_psd, sample_covariance};
use crate::RngStream;

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSettings {
    pub n_steps: usize,
    /// Per-step betas; when both are absent the standard continuous-time
    /// schedule is rescaled to `n_steps`.
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub guidance_scale: f64,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            beta_min: None,
            beta_max: None,
            guidance_scale: 1.0,
        }
    }
}

impl DiffusionSettings {
    pub fn schedule(&self) -> Result<DiffusionSchedule<f64>> {
        let s = match (self.beta_min, self.beta_max) {
            (Some(lo), Some(hi)) => DiffusionSchedule::new(lo, hi, self.n_steps),
            (None, None) => DiffusionSchedule::scaled(self.n_steps),
            _ => return Err(config_err("diffusion.beta_min", "set both beta_min and beta_max or neither")),
        };
        s.map_err(|e| config_err("diffusion", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(config_err("diffusion.n_steps", "must be >= 1"));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(config_err("diffusion.guidance_scale", "must be finite and >= 0"));
        }
        self.schedule().map(|_| ())
    }
}

/// Per-line value used to rank scanlines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineScore {
    /// Log generalized variance of each line across posterior samples.
    #[default]
    GeneralizedVariance,
    /// Sum of per-pixel log variances, ignoring within-line correlation.
    Pixelwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsampleSettings {
    pub prior: SyntheticPriorParams,
    /// Seed of the synthetic prior; fixed across sequence seeds.
    pub prior_seed: u64,
    pub frames: usize,
    /// Number of most recent frames the posterior conditions on.
    pub window: usize,
    pub k: usize,
    pub noise_std: f64,
    pub n_posterior: usize,
    pub diffusion: DiffusionSettings,
    pub policy: PolicyKind<Vec<usize>>,
    pub line_score: LineScore,
}

impl Default for SubsampleSettings {
    fn default() -> Self {
        Self {
            prior: SyntheticPriorParams::default(),
            prior_seed: 0,
            frames: 8,
            window: 4,
            k: 1,
            noise_std: 0.2,
            n_posterior: 16,
            diffusion: DiffusionSettings {
                n_steps: 200,
                ..DiffusionSettings::default()
            },
            policy: PolicyKind::MaxInfoGain,
            line_score: LineScore::default(),
        }
    }
}

impl SubsampleSettings {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate().map_err(|e| config_err("prior", e.to_string()))?;
        if self.k == 0 || self.k > self.prior.n_y {
            return Err(config_err("k", format!("must lie in 1..={} (number of lines)", self.prior.n_y)));
        }
        if self.frames == 0 {
            return Err(config_err("frames", "must be >= 1"));
        }
        if self.window == 0 {
            return Err(config_err("window", "must be >= 1"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(config_err("noise_std", "must be finite and > 0"));
        }
        if self.n_posterior < 2 {
            return Err(config_err("n_posterior", "must be >= 2"));
        }
        self.diffusion.validate()?;
        match &self.policy {
            PolicyKind::Static(lines) => {
                if lines.len() != self.k {
                    return Err(config_err("policy.static", format!("needs exactly k = {} lines", self.k)));
                }
                SubsamplingMask::new(lines.clone(), self.prior.n_z, self.prior.n_y)
                    .map_err(|e| config_err("policy.static", e.to_string()))?;
            }
            PolicyKind::Oracle => return Err(config_err("policy", "oracle is only defined for tracking")),
            _ => {}
        }
        Ok(())
    }
}

/// Information-gain value of acquiring each line, from posterior samples of
/// the frame: `(1/2) log |S_l + s^2 I| - (n_z/2) log s^2` with `S_l` the
/// sample covariance of line `l`, or its per-pixel variant.
pub fn line_scores(frames: &[DVector<f64>], n_z: usize, n_y: usize, noise_std: f64, kind: LineScore) -> Result<Vec<f64>> {
    let var = noise_std * noise_std;
    (0..n_y)
        .map(|l| {
            let lines: Vec<DVector<f64>> = frames.iter().map(|f| f.rows(l * n_z, n_z).into_owned()).collect();
            let mut cov = sample_covariance(&lines)?;
            match kind {
                LineScore::GeneralizedVariance => {
                    for i in 0..n_z {
                        cov[(i, i)] += var;
                    }
                    Ok((log_det_psd(&cov)? - n_z as f64 * var.ln()) / 2.0)
                }
                LineScore::Pixelwise => Ok((0..n_z).map(|i| ((cov[(i, i)] + var) / var).ln() / 2.0).sum()),
            }
        })
        .collect()
}

/// Indices of the `k` largest values in ascending index order; ties prefer
/// the lower index.
pub fn top_k_lines(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            context: "line score",
            step: 0,
        });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRecord {
    pub t: usize,
    pub chosen_lines: Vec<usize>,
    pub mae: f64,
    /// Mean per-pixel variance of the current frame across posterior samples.
    pub post_var_mean: f64,
    pub line_values: Vec<f64>,
    pub obs_digest: String,
}

impl CsvRecord for SubsampleRecord {
    fn csv_header() -> &'static [&'static str] {
        &["t", "chosen_lines", "mae", "post_var_mean"]
    }

    fn csv_row(&self) -> Vec<String> {
        vec![
            self.t.to_string(),
            self.chosen_lines.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";"),
            self.mae.to_string(),
            self.post_var_mean.to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSummary {
    pub mean_mae: f64,
    pub k: usize,
    pub n_y: usize,
}

type Posterior = (Vec<DVector<f64>>, LinearGaussianLikelihood<f64>, DVector<f64>);

struct Observed {
    indices: Vec<usize>,
    values: Vec<f64>,
}

fn window_observations(masks: &[SubsamplingMask], obs: &[DVector<f64>], start: usize, end: usize, frame_dim: usize) -> Observed {
    let mut o = Observed {
        indices: Vec::new(),
        values: Vec::new(),
    };
    for f in start..end {
        let offset = (f - start) * frame_dim;
        o.indices.extend(masks[f].pixel_indices().into_iter().map(|i| i + offset));
        o.values.extend(obs[f].iter().copied());
    }
    o
}

fn posterior(
    score: &GmmScore<f64>,
    o: &Observed,
    len: usize,
    frame_dim: usize,
    s: &SubsampleSettings,
    schedule: &DiffusionSchedule<f64>,
    rng: &RngStream,
) -> Result<Posterior> {
    let lik = LinearGaussianLikelihood::new(LinearOperator::select(o.indices.clone(), len * frame_dim)?, s.noise_std)?;
    let y = DVector::from_vec(o.values.clone());
    let samples = dps_sample(score, &lik, &y, schedule, s.diffusion.guidance_scale, s.n_posterior, rng)?;
    Ok((samples, lik, y))
}

/// Active scanline subsampling of a synthetic image sequence.
pub fn run_subsampling_loop(s: &SubsampleSettings, rng: &RngStream) -> Result<TrialLog<SubsampleRecord, SubsampleSummary>> {
    s.validate()?;
    let (n_z, n_y) = (s.prior.n_z, s.prior.n_y);
    let fd = n_z * n_y;
    let prior = ImageSequencePrior::synthetic(&s.prior, &RngStream::new(s.prior_seed).labeled("prior"))?;
    let truth = sample_sequence(&prior, s.frames, &rng.labeled("sequence"));
    let schedule = s.diffusion.schedule()?;
    let max_len = s.window.min(s.frames);
    let scores = (1..=max_len).map(|l| prior.window_score(l)).collect::<Result<Vec<_>>>()?;

    let mut masks: Vec<SubsamplingMask> = Vec::with_capacity(s.frames);
    let mut obs: Vec<DVector<f64>> = Vec::with_capacity(s.frames);
    let mut records = Vec::with_capacity(s.frames);
    for t in 0..s.frames {
        let len = s.window.min(t + 1);
        let start = t + 1 - len;
        let score = &scores[len - 1];
        let step = rng.labeled("frame").substream(t as u64);

        let line_values = if matches!(s.policy, PolicyKind::MaxInfoGain) {
            let past = window_observations(&masks, &obs, start, t, fd);
            let (samples, _, _) = posterior(score, &past, len, fd, s, &schedule, &step.labeled("predict"))?;
            let current: Vec<DVector<f64>> = samples.iter().map(|x| x.rows((len - 1) * fd, fd).into_owned()).collect();
            line_scores(&current, n_z, n_y, s.noise_std, s.line_score)?
        } else {
            Vec::new()
        };
        let chosen = match &s.policy {
            PolicyKind::MaxInfoGain => top_k_lines(&line_values, s.k)?,
            PolicyKind::Static(lines) => lines.clone(),
            PolicyKind::Random => {
                let mut v = rand::seq::index::sample(&mut step.labeled("policy").rng(), n_y, s.k).into_vec();
                v.sort_unstable();
                v
            }
            PolicyKind::Oracle => unreachable!("rejected by validate"),
        };
        let mask = SubsamplingMask::new(chosen, n_z, n_y)?;
        let y_t = apply_mask_noisy(&truth[t], &mask, s.noise_std, &step.labeled("acquire"))?;
        let obs_digest = digest(&y_t);
        masks.push(mask);
        obs.push(y_t);

        let all = window_observations(&masks, &obs, start, t + 1, fd);
        let (samples, lik, y) = posterior(score, &all, len, fd, s, &schedule, &step.labeled("posterior"))?;
        let mut best = (0, f64::NEG_INFINITY);
        for (i, x) in samples.iter().enumerate() {
            let ll = lik.log_likelihood(&y, x)?;
            if ll > best.1 {
                best = (i, ll);
            }
        }
        let current: Vec<DVector<f64>> = samples.iter().map(|x| x.rows((len - 1) * fd, fd).into_owned()).collect();
        let mae = (&current[best.0] - &truth[t]).abs().mean();
        let mean = current.iter().fold(DVector::zeros(fd), |a, x| a + x) / current.len() as f64;
        let post_var_mean = current.iter().map(|x| (x - &mean).norm_squared()).sum::<f64>()
            / ((current.len() - 1) * fd) as f64;
        records.push(SubsampleRecord {
            t,
            chosen_lines: masks[t].lines().to_vec(),
            mae,
            post_var_mean,
            line_values,
            obs_digest,
        });
    }
    let summary = SubsampleSummary {
        mean_mae: records.iter().map(|r| r.mae).sum::<f64>() / records.len() as f64,
        k: s.k,
        n_y,
    };
    Ok(TrialLog {
        header: RunHeader::bare(rng.seed()),
        policy: s.policy.name().to_string(),
        events: Vec::new(),
        records,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_prefers_high_values_then_low_index() {
        assert_eq!(top_k_lines(&[0.1, 0.5, 0.5, 0.2], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_lines(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert!(top_k_lines(&[f64::NAN], 1).is_err());
    }

    #[test]
    fn variance_in_known_columns_is_selected() {
        // frames 2 x 4, lines 1 and 3 vary across samples
        let frames: Vec<DVector<f64>> = (0..20)
            .map(|i| {
                let a = (i as f64 * 0.7).sin();
                let b = (i as f64 * 1.3).cos();
                DVector::from_vec(vec![0.0, 0.0, a, -a * 0.5, 0.0, 0.0, b, b * 0.3])
            })
            .collect();
        for kind in [LineScore::GeneralizedVariance, LineScore::Pixelwise] {
            let v = line_scores(&frames, 2, 4, 0.1, kind).unwrap();
            assert_eq!(top_k_lines(&v, 2).unwrap(), vec![1, 3]);
            assert!(v[0].abs() < 1e-6 && v[2].abs() < 1e-6);
        }
    }

    #[test]
    fn settings_reject_k_above_line_count() {
        let s = SubsampleSettings {
            k: 9,
            ..Default::default()
        };
        match s.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "k"),
            other => panic!("{other:?}"),
        }
    }
}

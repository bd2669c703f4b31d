//! Experiment configuration, seeded execution and output files.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::agent::{
    run_separation, run_subsampling_loop, run_tracking_loop, CsvRecord, RunHeader, SeparationRecord,
    SeparationSettings, SeparationSummary, SubsampleRecord, SubsampleSettings, SubsampleSummary, TrackRecord,
    TrackingSettings, TrackingSummary, TrialLog,
};
use crate::error::{Error, Result};
use crate::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Track,
    Subsample,
    Separate,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Track => "track",
            Self::Subsample => "subsample",
            Self::Separate => "separate",
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One experiment; only the section matching `experiment` may be present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track: Option<TrackingSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<SubsampleSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separate: Option<SeparationSettings>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
    #[default]
    Both,
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { path, message } => Error::Config {
            path: format!("{section}.{path}"),
            message,
        },
        other => Error::Config {
            path: section.to_string(),
            message: other.to_string(),
        },
    }
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        let mut c = Self {
            experiment,
            seeds: default_seeds(),
            output_dir: default_output_dir(),
            track: None,
            subsample: None,
            separate: None,
        };
        c.fill_defaults();
        c
    }

    /// Materializes the active section so the echo shows every parameter.
    pub fn fill_defaults(&mut self) {
        match self.experiment {
            Experiment::Track => {
                self.track.get_or_insert_with(Default::default);
            }
            Experiment::Subsample => {
                self.subsample.get_or_insert_with(Default::default);
            }
            Experiment::Separate => {
                self.separate.get_or_insert_with(Default::default);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config {
                path: "seeds".into(),
                message: "must list at least one seed".into(),
            });
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config {
                path: "seeds".into(),
                message: "seeds must be distinct".into(),
            });
        }
        let present = [
            (Experiment::Track, self.track.is_some()),
            (Experiment::Subsample, self.subsample.is_some()),
            (Experiment::Separate, self.separate.is_some()),
        ];
        for (e, is_set) in present {
            if is_set && e != self.experiment {
                return Err(Error::Config {
                    path: e.name().into(),
                    message: format!("section does not apply to experiment `{}`", self.experiment.name()),
                });
            }
        }
        if let Some(t) = &self.track {
            t.validate().map_err(|e| prefixed("track", e))?;
        }
        if let Some(s) = &self.subsample {
            s.validate().map_err(|e| prefixed("subsample", e))?;
        }
        if let Some(s) = &self.separate {
            s.validate().map_err(|e| prefixed("separate", e))?;
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { String::new() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Canonical JSON echo (sorted keys) without the seed list and output
    /// directory, which do not affect results.
    pub fn echo(&self) -> Result<Value> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("seeds");
            m.remove("output_dir");
        }
        Ok(v)
    }

    /// SHA-256 of the canonical echo; runs of one config share it across seeds.
    pub fn config_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(&self.echo()?)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn run_header(&self, seed: u64) -> Result<RunHeader> {
        Ok(RunHeader::new(self.echo()?, self.config_hash()?, seed))
    }

    pub fn run(&self, seed: u64) -> Result<RunArtifacts> {
        self.validate()?;
        let rng = RngStream::new(seed);
        let header = self.run_header(seed)?;
        let out = match self.experiment {
            Experiment::Track => {
                let mut log = run_tracking_loop(self.track.as_ref().expect("filled"), &rng)?;
                log.header = header;
                RunArtifacts::Track(log)
            }
            Experiment::Subsample => {
                let mut log = run_subsampling_loop(self.subsample.as_ref().expect("filled"), &rng)?;
                log.header = header;
                RunArtifacts::Subsample(log)
            }
            Experiment::Separate => {
                let mut log = run_separation(self.separate.as_ref().expect("filled"), &rng)?;
                log.header = header;
                RunArtifacts::Separate(log)
            }
        };
        Ok(out)
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    ExperimentConfig::from_json_str(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunArtifacts {
    Track(TrialLog<TrackRecord, TrackingSummary>),
    Subsample(TrialLog<SubsampleRecord, SubsampleSummary>),
    Separate(TrialLog<SeparationRecord, SeparationSummary>),
}

fn write_log<R: Serialize + CsvRecord, S: Serialize>(
    log: &TrialLog<R, S>,
    dir: &Path,
    stem: &str,
    format: OutputFormat,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        let p = dir.join(format!("{stem}.csv"));
        log.write_csv(BufWriter::new(File::create(&p)?))?;
        written.push(p);
    }
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        let p = dir.join(format!("{stem}.json"));
        log.write_json(BufWriter::new(File::create(&p)?))?;
        written.push(p);
    }
    Ok(written)
}

impl RunArtifacts {
    pub fn header(&self) -> &RunHeader {
        match self {
            Self::Track(l) => &l.header,
            Self::Subsample(l) => &l.header,
            Self::Separate(l) => &l.header,
        }
    }

    /// Writes `<experiment>_seed<N>.{csv,json}` into `dir`.
    pub fn write(&self, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
        let seed = self.header().seed;
        match self {
            Self::Track(l) => write_log(l, dir, &format!("track_seed{seed}"), format),
            Self::Subsample(l) => write_log(l, dir, &format!("subsample_seed{seed}"), format),
            Self::Separate(l) => write_log(l, dir, &format!("separate_seed{seed}"), format),
        }
    }

    pub fn summary_line(&self) -> String {
        let seed = self.header().seed;
        match self {
            Self::Track(l) => format!(
                "track seed={seed} policy={} angle_rmse={:.5} hr_mae={:.4} resamples={} reinit={}",
                l.policy, l.summary.angle_rmse, l.summary.hr_mae, l.summary.resamples, l.summary.reinitializations
            ),
            Self::Subsample(l) => format!(
                "subsample seed={seed} policy={} k={} mean_mae={:.5}",
                l.policy, l.summary.k, l.summary.mean_mae
            ),
            Self::Separate(l) => format!(
                "separate seed={seed} target={:?} max_mean_error_x={:.4} max_mean_error_h={:.4}",
                l.summary.guidance_target, l.summary.max_mean_error_x, l.summary.max_mean_error_h
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_of(e: Error) -> String {
        match e {
            Error::Config { path, .. } => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_is_filled() {
        let c = ExperimentConfig::from_json_str(r#"{"experiment": "track"}"#).unwrap();
        assert_eq!(c.track, Some(TrackingSettings::default()));
        assert_eq!(c.seeds, vec![0]);
        let echo = c.echo().unwrap();
        assert!(echo["track"]["n_particles"].is_number());
    }

    #[test]
    fn errors_carry_key_paths() {
        let e = ExperimentConfig::from_json_str(r#"{"experiment": "subsample", "subsample": {"k": 9}}"#).unwrap_err();
        assert_eq!(path_of(e), "subsample.k");
        let e = ExperimentConfig::from_json_str(r#"{"experiment": "track", "track": {"n_partcles": 3}}"#).unwrap_err();
        assert!(path_of(e).starts_with("track"));
        let e = ExperimentConfig::from_json_str(r#"{"seeds": [1]}"#).unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
        let e = ExperimentConfig::from_json_str(r#"{"experiment": "track", "subsample": {}}"#).unwrap_err();
        assert_eq!(path_of(e), "subsample");
    }

    #[test]
    fn round_trip() {
        for e in [Experiment::Track, Experiment::Subsample, Experiment::Separate] {
            let c = ExperimentConfig::new(e);
            let back = ExperimentConfig::from_json_str(&c.to_json_string().unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.config_hash().unwrap(), c.config_hash().unwrap());
        }
    }

    #[test]
    fn hash_ignores_seed_list_and_output_dir() {
        let a = ExperimentConfig::new(Experiment::Track);
        let mut b = a.clone();
        b.seeds = vec![4, 5];
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        b.track.as_mut().unwrap().n_particles = 100;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
    }
}

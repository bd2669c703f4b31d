use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub const ARTIFACT_VERSION: &str = concat!("cogsono ", env!("CARGO_PKG_VERSION"));

/// Provenance written at the top of every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub artifact_version: String,
}

impl RunHeader {
    pub fn new(config: serde_json::Value, config_hash: String, seed: u64) -> Self {
        Self {
            config,
            config_hash,
            seed,
            artifact_version: ARTIFACT_VERSION.to_string(),
        }
    }

    /// Header for runs started outside the config layer.
    pub fn bare(seed: u64) -> Self {
        Self::new(serde_json::Value::Null, String::new(), seed)
    }
}

/// Flat per-step row of a trial log.
pub trait CsvRecord {
    fn csv_header() -> &'static [&'static str];
    fn csv_row(&self) -> Vec<String>;
}

/// Append-only record of one loop run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialLog<R, S> {
    pub header: RunHeader,
    pub policy: String,
    /// Notable events such as filter re-initializations.
    pub events: Vec<String>,
    pub records: Vec<R>,
    pub summary: S,
}

impl<R: Serialize + CsvRecord, S: Serialize> TrialLog<R, S> {
    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    /// CSV with a leading `# config_hash=... seed=...` comment line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# config_hash={} seed={}", self.header.config_hash, self.header.seed)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(R::csv_header())?;
        for r in &self.records {
            out.write_record(r.csv_row())?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Short SHA-256 fingerprint of a vector's little-endian bytes.
pub fn digest(v: &DVector<f64>) -> String {
    let mut h = Sha256::new();
    for x in v.iter() {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = digest(&dvector![1.0, 2.0]);
        assert_eq!(a.len(), 16);
        assert_eq!(a, digest(&dvector![1.0, 2.0]));
        assert_ne!(a, digest(&dvector![1.0, 2.0000001]));
    }
}

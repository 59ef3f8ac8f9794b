//! JSON metric reports and run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric: String,
    pub seed: u64,
    /// Single number printed as the command's result.
    pub headline: f64,
    pub values: serde_json::Value,
    pub config: ExperimentConfig,
}

impl Report {
    pub fn new<T: Serialize>(metric: &str, headline: f64, values: &T, config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            metric: metric.to_string(),
            seed: config.metrics.seed,
            headline,
            values: serde_json::to_value(values)?,
            config: config.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub tool_version: String,
    pub duration_seconds: f64,
    pub artifacts: Vec<Artifact>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            seed: config.train.seed,
            tool_version: TOOL_VERSION.to_string(),
            duration_seconds: 0.0,
            artifacts: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn add(&mut self, role: &str, path: impl Into<PathBuf>) {
        self.artifacts.push(Artifact {
            role: role.to_string(),
            path: path.into(),
        });
    }

    /// Fails unless every listed artifact exists and is nonempty.
    pub fn verify(&self) -> Result<()> {
        for a in &self.artifacts {
            let len = std::fs::metadata(&a.path)
                .map_err(|e| Error::invalid(format!("artifact {} ({}): {e}", a.role, a.path.display())))?
                .len();
            if len == 0 {
                return Err(Error::invalid(format!("artifact {} ({}) is empty", a.role, a.path.display())));
            }
        }
        Ok(())
    }

    /// Writes the manifest to `path` after checking the artifact list.
    pub fn finish(mut self, path: &Path, started: std::time::Instant) -> Result<Self> {
        self.duration_seconds = started.elapsed().as_secs_f64();
        self.verify()?;
        write_json(path, &self)?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_checks_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let mut m = RunManifest::new("train", &cfg);
        let good = dir.path().join("a.csv");
        std::fs::write(&good, "x\n").unwrap();
        m.add("points", &good);
        assert!(m.verify().is_ok());
        let empty = dir.path().join("b.csv");
        std::fs::write(&empty, "").unwrap();
        m.add("empty", &empty);
        assert!(m.verify().is_err());
        m.artifacts.pop();
        m.add("missing", dir.path().join("c.csv"));
        assert!(m.verify().is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let r = Report::new("nfss", 0.25, &vec![1.0, 2.0], &cfg).unwrap();
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        let back: Report = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}

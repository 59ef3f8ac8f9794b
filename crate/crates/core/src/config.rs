//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{CrossingThreshold, ReuseExperimentConfig};
use crate::checkpoint::ModelKind;
use crate::data::DistributionSpec;
use crate::error::{Error, Result};
use crate::sampling::SampleConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { kind: ModelKind::Vrfno }
    }
}

/// Second-generation training on couplings produced by a first flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflowConfig {
    /// Number of (noise, endpoint) pairs generated.
    pub pairs: usize,
    /// Euler steps used to generate each endpoint.
    pub generation_steps: usize,
}

impl Default for ReflowConfig {
    fn default() -> Self {
        Self {
            pairs: 50_000,
            generation_steps: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub seed: u64,
    pub nfss_steps: usize,
    pub nfss_count: usize,
    pub gap_small: usize,
    pub gap_large: usize,
    pub gap_count: usize,
    pub marginal_t: Vec<f64>,
    pub marginal_n: usize,
    pub marginal_steps: usize,
    pub permutations: usize,
    pub crossing_dims: Vec<usize>,
    pub crossing_pairs: usize,
    pub crossing_grid: usize,
    pub crossing_threshold: CrossingThreshold,
    pub velgap_pairs: usize,
    pub velgap_t: Vec<f64>,
    pub coupling: ReuseExperimentConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            nfss_steps: 100,
            nfss_count: 1000,
            gap_small: 1,
            gap_large: 100,
            gap_count: 2000,
            marginal_t: vec![0.25, 0.5, 0.75, 1.0],
            marginal_n: 2000,
            marginal_steps: 100,
            permutations: 1000,
            crossing_dims: vec![2, 8, 32, 128],
            crossing_pairs: 10_000,
            crossing_grid: 101,
            crossing_threshold: CrossingThreshold::default(),
            velgap_pairs: 100_000,
            velgap_t: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            coupling: ReuseExperimentConfig::default(),
        }
    }
}

impl MetricsConfig {
    /// Evenly spaced grid of `crossing_grid` points on `[0, 1]`.
    pub fn crossing_t_grid(&self) -> Vec<f64> {
        let n = self.crossing_grid.max(2) - 1;
        (0..=n).map(|k| k as f64 / n as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub reflow: ReflowConfig,
    pub sample: SampleConfig,
    pub data: DistributionSpec,
    pub metrics: MetricsConfig,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Parses and validates a config file. `train.data_dim` follows
    /// `[data]` unless the file sets it.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let explicit_dim = table
            .get("train")
            .and_then(toml::Value::as_table)
            .is_some_and(|t| t.contains_key("data_dim"));
        if !explicit_dim {
            cfg.train.data_dim = cfg.data.dim();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one seed to training, sampling and metrics.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.sample.seed = seed;
        self.metrics.seed = seed;
    }

    /// Training configuration with the model selector's flags applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.data_dim = self.data.dim();
        if self.model.kind != ModelKind::Vrfno {
            t.viscous = false;
            t.noise_optimization = false;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| section("train", e))?;
        self.sample.validate().map_err(|e| section("sample", e))?;
        self.data.validate().map_err(|e| section("data", e))?;
        if self.train.data_dim != self.data.dim() {
            return Err(Error::Config(format!(
                "train.data_dim = {} but [data] has dimension {}",
                self.train.data_dim,
                self.data.dim()
            )));
        }
        if self.reflow.pairs == 0 || self.reflow.generation_steps == 0 {
            return Err(Error::Config("reflow.pairs and reflow.generation_steps must be >= 1".into()));
        }
        let m = &self.metrics;
        if m.nfss_steps == 0 || m.nfss_count == 0 || m.gap_count == 0 {
            return Err(Error::Config("metrics step and sample counts must be >= 1".into()));
        }
        if !(1 <= m.gap_small && m.gap_small < m.gap_large) {
            return Err(Error::Config("metrics.gap_small must satisfy 1 <= gap_small < gap_large".into()));
        }
        if m.marginal_t.iter().chain(&m.velgap_t).any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("metrics time grids must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn section(name: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("[{name}] {m}")),
        other => Error::Config(format!("[{name}] {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn non_default_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.kind = ModelKind::Reflow;
        cfg.train.learning_rate = 3.7e-4;
        cfg.train.reuse_pool_size = Some(1234);
        cfg.data = DistributionSpec::GaussianMixture {
            means: vec![vec![-2.0, 0.5], vec![3.0, 3.0]],
            vars: vec![vec![0.3, 0.3], vec![1.0, 2.0]],
            weights: vec![0.25, 0.75],
        };
        cfg.metrics.crossing_threshold = CrossingThreshold::Absolute(0.125);
        cfg.sample.mode = crate::sampling::SampleMode::Reparameterized;
        cfg.set_seed(42);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::parse("[model]\nkind = \"rf\"\n[train]\niterations = 10\n").unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Rf);
        assert_eq!(cfg.train.iterations, 10);
        assert_eq!(cfg.train.batch_size, 500);
        assert!(!cfg.effective_train().viscous);
    }

    #[test]
    fn errors_name_the_location() {
        let e = ExperimentConfig::parse("[train]\nbatch_size = 10\nlearning_rat = 0.1\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("learning_rat") && msg.contains("line 3"), "{msg}");
        let e = ExperimentConfig::parse("[train]\nlearning_rate = -1.0\n").unwrap_err();
        assert!(e.to_string().contains("[train]"), "{e}");
        let e = ExperimentConfig::parse(
            "[train]\ndata_dim = 2\n[data]\nkind = \"gaussian\"\nmean = [0.0, 0.0, 0.0]\nvar = [1.0, 1.0, 1.0]\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("data_dim"), "{e}");
    }

    #[test]
    fn data_dim_follows_data_when_unset() {
        let cfg =
            ExperimentConfig::parse("[data]\nkind = \"gaussian\"\nmean = [0.0, 0.0, 0.0]\nvar = [1.0, 1.0, 1.0]\n").unwrap();
        assert_eq!(cfg.train.data_dim, 3);
    }

    #[test]
    fn crossing_grid_spacing() {
        let g = MetricsConfig::default().crossing_t_grid();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[100], 1.0);
        assert!((g[50] - 0.5).abs() < 1e-15);
    }
}

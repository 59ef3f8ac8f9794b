//! Synthetic target distributions and coupling constructors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Target distribution family. Covariances are diagonal and given as
/// per-dimension variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    Gaussian {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    GaussianMixture {
        means: Vec<Vec<f64>>,
        vars: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
    TwoMoons {
        scale: f64,
        noise: f64,
    },
    Checkerboard {
        /// Cells per side; points occupy cells with even `row + col`.
        cells: usize,
        /// Side length of one cell.
        cell_size: f64,
    },
}

impl Default for DistributionSpec {
    fn default() -> Self {
        DistributionSpec::Gaussian {
            mean: vec![5.0, 5.0],
            var: vec![1.0, 1.0],
        }
    }
}

impl DistributionSpec {
    pub fn standard_normal(dim: usize) -> Self {
        DistributionSpec::Gaussian {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Gaussian { mean, .. } => mean.len(),
            DistributionSpec::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
            DistributionSpec::TwoMoons { .. } | DistributionSpec::Checkerboard { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        match self {
            DistributionSpec::Gaussian { mean, var } => {
                if mean.is_empty() || mean.len() != var.len() {
                    return Err(Error::invalid("gaussian: mean and var must be nonempty and equal length"));
                }
                if !positive(var) {
                    return Err(Error::invalid("gaussian: variances must be > 0"));
                }
            }
            DistributionSpec::GaussianMixture { means, vars, weights } => {
                let d = self.dim();
                if means.is_empty() || means.len() != vars.len() || means.len() != weights.len() {
                    return Err(Error::invalid("mixture: means, vars, weights must have equal nonzero length"));
                }
                if d == 0 || means.iter().chain(vars).any(|v| v.len() != d) {
                    return Err(Error::invalid("mixture: component dims disagree"));
                }
                if !vars.iter().all(|v| positive(v)) {
                    return Err(Error::invalid("mixture: variances must be > 0"));
                }
                if weights.iter().any(|&w| !(w >= 0.0)) {
                    return Err(Error::invalid("mixture: weights must be >= 0"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-5 {
                    return Err(Error::invalid(format!("mixture: weights sum to {total}, not 1")));
                }
            }
            DistributionSpec::TwoMoons { scale, noise } => {
                if !(*scale > 0.0) || !(*noise >= 0.0) {
                    return Err(Error::invalid("two_moons: scale must be > 0 and noise >= 0"));
                }
            }
            DistributionSpec::Checkerboard { cells, cell_size } => {
                if *cells < 2 || !(*cell_size > 0.0) {
                    return Err(Error::invalid("checkerboard: need cells >= 2 and cell_size > 0"));
                }
            }
        }
        Ok(())
    }
}

fn gaussian_row(mean: &[f64], var: &[f64], rng: &mut RngStream, out: &mut Vec<f32>) {
    for (&m, &v) in mean.iter().zip(var) {
        out.push((m + v.sqrt() * rng.normal() as f64) as f32);
    }
}

/// Cell membership for the checkerboard family.
pub fn checkerboard_contains(cells: usize, cell_size: f64, p: &[f32]) -> bool {
    let cell_size = cell_size as f32;
    let half = cells as f32 * cell_size / 2.0;
    let (cx, cy) = ((p[0] + half) / cell_size, (p[1] + half) / cell_size);
    if cx < 0.0 || cy < 0.0 || cx >= cells as f32 || cy >= cells as f32 {
        return false;
    }
    (cx.floor() as usize + cy.floor() as usize) % 2 == 0
}

/// `n` i.i.d. draws from `spec`, as a `[n, dim]` tensor.
pub fn sample_target(spec: &DistributionSpec, n: usize, rng: &mut RngStream) -> Result<Tensor> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("sample_target: n must be >= 1"));
    }
    let d = spec.dim();
    let mut data = Vec::with_capacity(n * d);
    match spec {
        DistributionSpec::Gaussian { mean, var } => {
            for _ in 0..n {
                gaussian_row(mean, var, rng, &mut data);
            }
        }
        DistributionSpec::GaussianMixture { means, vars, weights } => {
            for _ in 0..n {
                let u = rng.uniform_f64();
                let mut acc = 0.0;
                let mut k = weights.len() - 1;
                for (i, &w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                gaussian_row(&means[k], &vars[k], rng, &mut data);
            }
        }
        DistributionSpec::TwoMoons { scale, noise } => {
            let (scale, noise) = (*scale as f32, *noise as f32);
            for _ in 0..n {
                let upper = rng.uniform(0.0, 1.0) < 0.5;
                let theta = rng.uniform(0.0, std::f32::consts::PI);
                let (x, y) = if upper {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                let (nx, ny) = (rng.normal() * noise, rng.normal() * noise);
                data.push(scale * (x - 0.5 + nx));
                data.push(scale * (y - 0.25 + ny));
            }
        }
        DistributionSpec::Checkerboard { cells, cell_size } => {
            let cell_size = *cell_size as f32;
            let half = *cells as f32 * cell_size / 2.0;
            let black: Vec<(usize, usize)> = (0..*cells)
                .flat_map(|i| (0..*cells).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            for _ in 0..n {
                let (i, j) = black[rng.index(black.len())];
                let x = (i as f32 + rng.uniform(0.0, 1.0)) * cell_size - half;
                let y = (j as f32 + rng.uniform(0.0, 1.0)) * cell_size - half;
                data.push(x);
                data.push(y);
            }
        }
    }
    Tensor::new(vec![n, d], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    Arbitrary,
    Deterministic,
    Optimized,
}

/// A batch of `(x0, x1)` pairs of one kind, stored as two `[n, dim]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Couplings {
    pub x0: Tensor,
    pub x1: Tensor,
    pub kind: CouplingKind,
}

impl Couplings {
    pub fn new(x0: Tensor, x1: Tensor, kind: CouplingKind) -> Result<Self> {
        if x0.shape() != x1.shape() || x0.shape().len() != 2 {
            return Err(Error::shape(
                "couplings",
                format!("{:?} vs {:?}", x0.shape(), x1.shape()),
            ));
        }
        if !x0.is_finite() || !x1.is_finite() {
            return Err(Error::NonFinite { op: "couplings" });
        }
        Ok(Self { x0, x1, kind })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x0.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x0: self.x0.select_rows(idx)?,
            x1: self.x1.select_rows(idx)?,
            kind: self.kind,
        })
    }
}

/// Pairs every target with an independent N(0, I) draw.
pub fn make_arbitrary_couplings(targets: &Tensor, rng: &mut RngStream) -> Result<Couplings> {
    if targets.shape().len() != 2 {
        return Err(Error::shape("make_arbitrary_couplings", format!("{:?}", targets.shape())));
    }
    let x0 = rng.normal_tensor(targets.rows(), targets.cols());
    Couplings::new(x0, targets.clone(), CouplingKind::Arbitrary)
}

/// Reads a 2D point set: two numeric comma-separated columns. A leading
/// non-numeric row is treated as a header.
pub fn read_points_csv(path: &Path) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    let mut data = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: std::result::Result<Vec<f32>, _> = rec.iter().map(str::parse::<f32>).collect();
        match parsed {
            Ok(v) if v.len() == 2 && v.iter().all(|x| x.is_finite()) => data.extend(v),
            Err(_) if i == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: "expected two finite numeric columns".into(),
                })
            }
        }
    }
    if data.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "no points".into(),
        });
    }
    Tensor::new(vec![data.len() / 2, 2], data)
}

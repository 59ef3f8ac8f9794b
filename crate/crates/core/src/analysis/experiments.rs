use serde::{Deserialize, Serialize};

use crate::data::{sample_target, CouplingKind, DistributionSpec};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sampling::{initial_noise, integrate, integrate_endpoint, SampleConfig, SampleMode};
use crate::training::{interpolate, reflow_generate_couplings, rf_train, BatchSource, Model, TrainConfig, Trainer};

use super::two_sample::{energy_distance, energy_distance_statistic, TwoSampleReport};

fn sample_mode(model: &Model) -> SampleMode {
    if model.encoder.is_some() {
        SampleMode::Reparameterized
    } else {
        SampleMode::Gaussian
    }
}

/// Initial states for `n` samples, using fresh target rows as encoder
/// references when the model has an encoder.
pub fn model_initial_states(
    model: &Model,
    target: &DistributionSpec,
    n: usize,
    rng: &mut RngStream,
) -> Result<crate::autodiff::Tensor> {
    let cfg = SampleConfig {
        count: n,
        mode: sample_mode(model),
        ..SampleConfig::default()
    };
    let refs = match cfg.mode {
        SampleMode::Reparameterized => Some(sample_target(target, n, rng)?),
        SampleMode::Gaussian => None,
    };
    initial_noise(model, refs.as_ref(), &cfg, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalCheck {
    pub t: f64,
    pub report: TwoSampleReport,
}

/// Compares sampler states at each `t` against interpolation states built
/// from the model's own couplings (encoder noise when present, plain noise
/// otherwise). Every `t` must lie on the `steps` grid.
pub fn marginal_preservation_check(
    model: &Model,
    target: &DistributionSpec,
    t_grid: &[f64],
    n: usize,
    steps: usize,
    permutations: usize,
    rng: &mut RngStream,
) -> Result<Vec<MarginalCheck>> {
    let ks: Vec<usize> = t_grid
        .iter()
        .map(|&t| {
            let k = (t * steps as f64).round();
            if !(0.0..=1.0).contains(&t) || (k - t * steps as f64).abs() > 1e-9 {
                Err(Error::invalid(format!("t = {t} is not on the {steps}-step grid")))
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<_>>()?;

    let mut ref_rng = rng.fork("marginal.reference");
    let x1 = sample_target(target, n, &mut ref_rng)?;
    let x0 = match &model.encoder {
        Some(_) => {
            let cfg = SampleConfig {
                count: n,
                mode: SampleMode::Reparameterized,
                ..SampleConfig::default()
            };
            initial_noise(model, Some(&x1), &cfg, &mut ref_rng)?
        }
        None => ref_rng.normal_tensor(n, target.dim()),
    };

    let mut gen_rng = rng.fork("marginal.sampler");
    let z0 = model_initial_states(model, target, n, &mut gen_rng)?;
    let traj = integrate(&model.field, &z0, steps, model.viscous)?;

    let mut perm_rng = rng.fork("marginal.permutations");
    t_grid
        .iter()
        .zip(ks)
        .map(|(&t, k)| {
            let reference = interpolate(&x0, &x1, t as f32)?;
            let report = energy_distance(&traj.states[k], &reference, permutations, &mut perm_rng)?;
            Ok(MarginalCheck { t, report })
        })
        .collect()
}

/// Energy distance between `steps`-step generations and fresh target draws.
pub fn generation_distance(
    model: &Model,
    target: &DistributionSpec,
    steps: usize,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let root = RngStream::new(seed);
    let mut gen = root.fork("eval.generate");
    let x0 = model_initial_states(model, target, count, &mut gen)?;
    let samples = integrate_endpoint(&model.field, &x0, steps, model.viscous)?;
    let reference = sample_target(target, count, &mut root.fork("eval.reference"))?;
    energy_distance_statistic(&samples, &reference)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReuseExperimentConfig {
    pub target: DistributionSpec,
    /// Rectified flow used to generate deterministic couplings.
    pub pretrain: TrainConfig,
    /// Per-condition training; `reuse_pool_size` is overridden.
    pub train: TrainConfig,
    pub pool_sizes: Vec<usize>,
    /// Also train on fresh arbitrary couplings every iteration.
    pub include_fresh_arbitrary: bool,
    pub generation_steps: usize,
    pub eval_steps: usize,
    pub eval_count: usize,
    pub seed: u64,
}

impl Default for ReuseExperimentConfig {
    fn default() -> Self {
        Self {
            target: DistributionSpec::default(),
            pretrain: TrainConfig {
                iterations: 5000,
                ..TrainConfig::rectified_flow()
            },
            train: TrainConfig {
                iterations: 5000,
                ..TrainConfig::rectified_flow()
            },
            pool_sizes: vec![5_000, 50_000],
            include_fresh_arbitrary: true,
            generation_steps: 100,
            eval_steps: 1,
            eval_count: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReuseRow {
    pub coupling: CouplingKind,
    /// `None` for fresh couplings every iteration.
    pub pool_size: Option<usize>,
    pub energy_distance: f64,
    pub final_loss: f64,
}

/// Trains rectified flow from scratch on each coupling condition with
/// equal iterations and batch size, then scores generations against the
/// target. A pretrained field may be supplied; otherwise one is trained.
pub fn coupling_reuse_experiment(cfg: &ReuseExperimentConfig, pretrained: Option<&Model>) -> Result<Vec<ReuseRow>> {
    let root = RngStream::new(cfg.seed);
    let owned;
    let pre = match pretrained {
        Some(m) => m,
        None => {
            let mut tr = Trainer::new(TrainConfig {
                noise_optimization: false,
                viscous: false,
                ..cfg.pretrain.clone()
            })?;
            tr.run(&BatchSource::Target(&cfg.target))?;
            owned = tr.model;
            &owned
        }
    };
    let max_pool = cfg.pool_sizes.iter().copied().max().unwrap_or(0);
    let deterministic = if max_pool > 0 {
        Some(reflow_generate_couplings(&pre.field, max_pool, cfg.generation_steps, &mut root.fork("reuse.reflow"))?)
    } else {
        None
    };
    let base = TrainConfig {
        noise_optimization: false,
        viscous: false,
        ..cfg.train.clone()
    };
    let eval = |m: &Model| generation_distance(m, &cfg.target, cfg.eval_steps, cfg.eval_count, cfg.seed);
    let last = |log: &[crate::training::LossRecord]| {
        let tail = &log[log.len().saturating_sub(100)..];
        tail.iter().map(|l| l.total).sum::<f64>() / tail.len().max(1) as f64
    };

    let mut rows = Vec::new();
    if cfg.include_fresh_arbitrary {
        let mut tr = Trainer::new(TrainConfig {
            reuse_pool_size: None,
            ..base.clone()
        })?;
        let log = tr.run(&BatchSource::Target(&cfg.target))?;
        rows.push(ReuseRow {
            coupling: CouplingKind::Arbitrary,
            pool_size: None,
            energy_distance: eval(&tr.model)?,
            final_loss: last(&log),
        });
    }
    for &p in &cfg.pool_sizes {
        let mut tr = Trainer::new(TrainConfig {
            reuse_pool_size: Some(p),
            ..base.clone()
        })?;
        let log = tr.run(&BatchSource::Target(&cfg.target))?;
        rows.push(ReuseRow {
            coupling: CouplingKind::Arbitrary,
            pool_size: Some(p),
            energy_distance: eval(&tr.model)?,
            final_loss: last(&log),
        });
    }
    if let Some(det) = &deterministic {
        for &p in &cfg.pool_sizes {
            let (model, log) = rf_train(
                TrainConfig {
                    reuse_pool_size: Some(p),
                    ..base.clone()
                },
                det,
            )?;
            rows.push(ReuseRow {
                coupling: CouplingKind::Deterministic,
                pool_size: Some(p),
                energy_distance: eval(&model)?,
                final_loss: last(&log),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub viscous: bool,
    pub noise_optimization: bool,
    pub energy_distance: f64,
}

/// The four combinations of history input and noise optimization:
/// A neither, B history only, C noise optimization only, D both.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    [("A", false, false), ("B", true, false), ("C", false, true), ("D", true, true)]
        .into_iter()
        .map(|(l, v, n)| {
            (
                l.to_string(),
                TrainConfig {
                    viscous: v,
                    noise_optimization: n,
                    ..base.clone()
                },
            )
        })
        .collect()
}

pub fn ablation_table(
    base: &TrainConfig,
    target: &DistributionSpec,
    eval_steps: usize,
    eval_count: usize,
    eval_seed: u64,
) -> Result<Vec<AblationRow>> {
    ablation_configs(base)
        .into_iter()
        .map(|(label, cfg)| {
            let mut tr = Trainer::new(cfg.clone())?;
            tr.run(&BatchSource::Target(target))?;
            Ok(AblationRow {
                label,
                viscous: cfg.viscous,
                noise_optimization: cfg.noise_optimization,
                energy_distance: generation_distance(&tr.model, target, eval_steps, eval_count, eval_seed)?,
            })
        })
        .collect()
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("config  history  noise_opt  energy_distance\n");
    for r in rows {
        s.push_str(&format!(
            "{:<7} {:<8} {:<10} {:.6}\n",
            r.label,
            if r.viscous { "yes" } else { "no" },
            if r.noise_optimization { "yes" } else { "no" },
            r.energy_distance
        ));
    }
    s
}

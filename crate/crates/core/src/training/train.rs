use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{make_arbitrary_couplings, sample_target, CouplingKind, Couplings, DistributionSpec};
use crate::error::{Error, Result};
use crate::nets::{register_params, Encoder, EncoderSpec, NoiseScale, VelocityField, VelocityFieldSpec};
use crate::rng::RngStream;
use crate::sampling::integrate_endpoint;

use super::loss::{joint_loss_on, LossOptions, StepNoise};
use super::optim::{OptimizerKind, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f32,
    pub alpha: f64,
    pub delta_t: f64,
    pub data_dim: usize,
    pub seed: u64,
    pub reuse_pool_size: Option<usize>,
    pub perturbation_scale: f32,
    pub optimizer: OptimizerKind,
    /// Feed the historical velocity to the field.
    pub viscous: bool,
    /// Learn the noise encoder jointly with the field.
    pub noise_optimization: bool,
    /// Scale the noise by `sigma` instead of `sigma^2`.
    pub reparam_std: bool,
    /// Weight of the zero-history regression term (0 = off).
    pub zero_history_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            iterations: 20_000,
            learning_rate: 1e-3,
            alpha: 1e-3,
            delta_t: 0.1,
            data_dim: 2,
            seed: 0,
            reuse_pool_size: None,
            perturbation_scale: 0.1,
            optimizer: OptimizerKind::Adam,
            viscous: true,
            noise_optimization: true,
            reparam_std: false,
            zero_history_weight: 1.0,
        }
    }
}

impl TrainConfig {
    /// Plain rectified flow: no history input, no encoder.
    pub fn rectified_flow() -> Self {
        Self {
            viscous: false,
            noise_optimization: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.delta_t > 0.0 && self.delta_t < 1.0) {
            return Err(Error::Config(format!("delta_t must lie in (0, 1), got {}", self.delta_t)));
        }
        if self.data_dim == 0 {
            return Err(Error::Config("data_dim must be >= 1".into()));
        }
        if !(self.perturbation_scale >= 0.0) {
            return Err(Error::Config("perturbation_scale must be >= 0".into()));
        }
        if !(self.zero_history_weight >= 0.0) {
            return Err(Error::Config("zero_history_weight must be >= 0".into()));
        }
        if self.reuse_pool_size == Some(0) {
            return Err(Error::Config("reuse_pool_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn noise_scale(&self) -> NoiseScale {
        if self.reparam_std {
            NoiseScale::StdDev
        } else {
            NoiseScale::Variance
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            alpha: self.alpha,
            delta_t: self.delta_t,
            history: self.viscous,
            noise_scale: self.noise_scale(),
            zero_history_weight: self.zero_history_weight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub vcl: f64,
    pub kll: f64,
    pub total: f64,
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,vcl,kll,total")?;
    for r in log {
        writeln!(f, "{},{},{},{}", r.iteration, r.vcl, r.kll, r.total)?;
    }
    f.flush()?;
    Ok(())
}

/// Velocity field plus the optional noise encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub field: VelocityField,
    pub encoder: Option<Encoder>,
    /// Whether the field takes the previous prediction as history.
    pub viscous: bool,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Self {
        let root = RngStream::new(cfg.seed);
        let field = VelocityField::new(
            VelocityFieldSpec {
                data_dim: cfg.data_dim,
                ..VelocityFieldSpec::default()
            },
            root.fork("init.field").seed(),
        );
        let encoder = cfg.noise_optimization.then(|| {
            Encoder::new(
                EncoderSpec {
                    data_dim: cfg.data_dim,
                    perturbation_scale: cfg.perturbation_scale,
                    ..EncoderSpec::default()
                },
                root.fork("init.encoder").seed(),
            )
        });
        Self {
            field,
            encoder,
            viscous: cfg.viscous,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.field.params();
        if let Some(e) = &self.encoder {
            p.extend(e.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.field.params_mut();
        if let Some(e) = &mut self.encoder {
            p.extend(e.params_mut());
        }
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.field.param_names();
        if let Some(e) = &self.encoder {
            n.extend(e.param_names());
        }
        n
    }
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub vcl: f64,
    pub kll: f64,
    pub total: f64,
}

/// Draws the time values for one batch: `U(dt, 1)` when the history term
/// is active, `U(0, 1)` otherwise.
pub fn draw_times(rows: usize, cfg: &TrainConfig, rng: &mut RngStream) -> Vec<f32> {
    let lo = if cfg.viscous { cfg.delta_t } else { 0.0 };
    (0..rows).map(|_| (lo + (1.0 - lo) * rng.uniform_f64()) as f32).collect()
}

fn diverged(iteration: u64, vcl: f64, kll: f64, total: f64) -> Error {
    Error::Divergence {
        iteration,
        vcl,
        kll,
        total,
    }
}

/// One gradient step on `model` with fully specified noise. `eps` doubles
/// as `x0` when the model has no encoder.
pub fn train_step_with(
    model: &mut Model,
    x1: &Tensor,
    noise: &StepNoise,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    iteration: u64,
) -> Result<StepLoss> {
    if x1.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut tape = Tape::<f32>::new();
    let vf_vars = register_params(&mut tape, &model.field.params());
    let enc_vars: Vec<Var> = match &model.encoder {
        Some(e) => register_params(&mut tape, &e.params()),
        None => Vec::new(),
    };
    let enc = model.encoder.as_ref().map(|e| (e, enc_vars.as_slice()));
    let out = match joint_loss_on(&mut tape, &model.field, &vf_vars, enc, x1, noise, &cfg.loss_options(), None) {
        Ok(o) => o,
        Err(Error::NonFinite { .. }) => return Err(diverged(iteration, f64::NAN, f64::NAN, f64::NAN)),
        Err(e) => return Err(e),
    };
    let loss = StepLoss {
        vcl: tape.value(out.vcl).item() as f64,
        kll: out.kll.map_or(0.0, |k| tape.value(k).item() as f64),
        total: tape.value(out.total).item() as f64,
    };
    if !(loss.vcl.is_finite() && loss.kll.is_finite() && loss.total.is_finite()) {
        return Err(diverged(iteration, loss.vcl, loss.kll, loss.total));
    }
    tape.backward(out.total)?;
    let vars: Vec<Var> = vf_vars.into_iter().chain(enc_vars).collect();
    let mut params = model.params_mut();
    for (p, v) in params.iter_mut().zip(&vars) {
        p.zero_grad();
        if let Some(g) = tape.grad(*v) {
            p.accumulate_grad(g)?;
        }
    }
    opt.update(&mut params, cfg.learning_rate)?;
    for p in params.iter_mut() {
        p.zero_grad();
    }
    Ok(loss)
}

/// One joint step on a batch of data points: draws `eps`, the encoder
/// perturbation and the times from `rng`, in that order.
pub fn vrfno_train_step(
    model: &mut Model,
    batch_x1: &Tensor,
    rng: &mut RngStream,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    iteration: u64,
) -> Result<StepLoss> {
    let rows = batch_x1.rows();
    let eps = rng.normal_tensor(rows, batch_x1.cols());
    let tau = model.encoder.as_ref().and_then(|e| e.draw_perturbation(rows, rng));
    let t = draw_times(rows, cfg, rng);
    train_step_with(model, batch_x1, &StepNoise { eps, tau, t }, cfg, opt, iteration)
}

/// One step on fixed couplings; the model must not carry an encoder.
pub fn rf_train_step(
    model: &mut Model,
    batch: &Couplings,
    rng: &mut RngStream,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    iteration: u64,
) -> Result<StepLoss> {
    if model.encoder.is_some() {
        return Err(Error::invalid("fixed couplings cannot drive a noise encoder"));
    }
    let t = draw_times(batch.len(), cfg, rng);
    let noise = StepNoise {
        eps: batch.x0.clone(),
        tau: None,
        t,
    };
    train_step_with(model, &batch.x1, &noise, cfg, opt, iteration)
}

/// Where training batches come from.
pub enum BatchSource<'a> {
    /// Fresh target samples every iteration.
    Target(&'a DistributionSpec),
    /// A fixed set of data points, resampled with replacement.
    Dataset(&'a Tensor),
    /// A fixed set of couplings, resampled with replacement.
    Couplings(&'a Couplings),
}

/// Training run state; everything needed to resume bit-exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub rng: RngStream,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config);
        let optimizer = OptimizerState::new(config.optimizer, &model.params());
        let rng = RngStream::new(config.seed).fork("train");
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            iteration: 0,
        })
    }

    fn pick(&mut self, n: usize) -> Vec<usize> {
        (0..self.config.batch_size).map(|_| self.rng.index(n)).collect()
    }

    pub fn step(&mut self, source: &BatchSource) -> Result<StepLoss> {
        let b = self.config.batch_size;
        let it = self.iteration;
        let loss = match source {
            BatchSource::Target(spec) => {
                let x1 = sample_target(spec, b, &mut self.rng)?;
                if self.model.encoder.is_some() {
                    vrfno_train_step(&mut self.model, &x1, &mut self.rng, &self.config, &mut self.optimizer, it)?
                } else {
                    let c = make_arbitrary_couplings(&x1, &mut self.rng)?;
                    rf_train_step(&mut self.model, &c, &mut self.rng, &self.config, &mut self.optimizer, it)?
                }
            }
            BatchSource::Dataset(data) => {
                if data.rows() == 0 {
                    return Err(Error::invalid("empty dataset"));
                }
                let idx = self.pick(data.rows());
                let x1 = data.select_rows(&idx)?;
                if self.model.encoder.is_some() {
                    vrfno_train_step(&mut self.model, &x1, &mut self.rng, &self.config, &mut self.optimizer, it)?
                } else {
                    let c = make_arbitrary_couplings(&x1, &mut self.rng)?;
                    rf_train_step(&mut self.model, &c, &mut self.rng, &self.config, &mut self.optimizer, it)?
                }
            }
            BatchSource::Couplings(c) => {
                if c.is_empty() {
                    return Err(Error::invalid("empty coupling set"));
                }
                let idx = self.pick(c.len());
                let batch = c.select(&idx)?;
                rf_train_step(&mut self.model, &batch, &mut self.rng, &self.config, &mut self.optimizer, it)?
            }
        };
        self.iteration += 1;
        Ok(loss)
    }

    /// Runs until `config.iterations` steps have been taken, logging every
    /// step. A configured reuse pool is drawn once up front.
    pub fn run(&mut self, source: &BatchSource) -> Result<Vec<LossRecord>> {
        let pool = match (source, self.config.reuse_pool_size) {
            (BatchSource::Target(spec), Some(p)) => {
                let mut prng = self.rng.fork("pool");
                let x1 = sample_target(spec, p, &mut prng)?;
                Some(if self.model.encoder.is_some() {
                    Pooled::Data(x1)
                } else {
                    Pooled::Pairs(make_arbitrary_couplings(&x1, &mut prng)?)
                })
            }
            (BatchSource::Dataset(d), Some(p)) if p < d.rows() => Some(Pooled::Data(d.select_rows(&(0..p).collect::<Vec<_>>())?)),
            (BatchSource::Couplings(c), Some(p)) if p < c.len() => {
                Some(Pooled::Pairs(c.select(&(0..p).collect::<Vec<_>>())?))
            }
            _ => None,
        };
        let src = match &pool {
            Some(Pooled::Data(d)) => BatchSource::Dataset(d),
            Some(Pooled::Pairs(c)) => BatchSource::Couplings(c),
            None => match source {
                BatchSource::Target(s) => BatchSource::Target(s),
                BatchSource::Dataset(d) => BatchSource::Dataset(d),
                BatchSource::Couplings(c) => BatchSource::Couplings(c),
            },
        };
        let mut log = Vec::with_capacity(self.config.iterations);
        while (self.iteration as usize) < self.config.iterations {
            let it = self.iteration;
            let l = self.step(&src)?;
            if it % 1000 == 0 {
                log::debug!("iter {it}: vcl {:.5} kll {:.5} total {:.5}", l.vcl, l.kll, l.total);
            }
            log.push(LossRecord {
                iteration: it,
                vcl: l.vcl,
                kll: l.kll,
                total: l.total,
            });
        }
        Ok(log)
    }
}

enum Pooled {
    Data(Tensor),
    Pairs(Couplings),
}

/// Trains rectified flow on couplings of one kind.
pub fn rf_train(config: TrainConfig, couplings: &Couplings) -> Result<(Model, Vec<LossRecord>)> {
    let cfg = TrainConfig {
        noise_optimization: false,
        ..config
    };
    let mut tr = Trainer::new(cfg)?;
    let log = tr.run(&BatchSource::Couplings(couplings))?;
    Ok((tr.model, log))
}

/// Pairs `n` fresh standard-normal noises with their `steps`-step Euler
/// endpoints under a pretrained field.
pub fn reflow_generate_couplings(
    field: &VelocityField,
    n: usize,
    steps: usize,
    rng: &mut RngStream,
) -> Result<Couplings> {
    use crate::nets::VelocityModel;
    let x0 = rng.normal_tensor(n, field.data_dim());
    let x1 = integrate_endpoint(field, &x0, steps, false)?;
    Couplings::new(x0, x1, CouplingKind::Deterministic)
}

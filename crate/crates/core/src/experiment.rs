//! End-to-end pipelines shared by the command-line tool and the
//! acceptance suite. Every numeric artifact is a function of the config.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    coupling_reuse_experiment, crossing_probability_estimate, log_frequency_slope, marginal_preservation_check,
    model_endpoint_gap, model_initial_states, nfss, velocity_state_gap_check,
};
use crate::checkpoint::{self, CheckpointHeader, ModelKind};
use crate::config::ExperimentConfig;
use crate::data::sample_target;
use crate::error::{Error, Result};
use crate::plot::trajectory_svg;
use crate::report::{write_json, Report, RunManifest};
use crate::rng::RngStream;
use crate::sampling::{batch_sample, integrate, read_trajectory_csv, save_trajectory_csv, write_points_csv, SampleMode, Trajectory};
use crate::training::{
    reflow_generate_couplings, write_loss_csv, BatchSource, LossRecord, Model, OptimizerState, TrainConfig, Trainer,
};

pub struct Trained {
    pub header: CheckpointHeader,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub log: Vec<LossRecord>,
}

/// Trains the configured model. Reflow trains a first flow on fresh
/// pairs, generates deterministic couplings with it and trains a second
/// flow from scratch on those; the returned log is the second stage's.
pub fn train_model(cfg: &ExperimentConfig) -> Result<Trained> {
    cfg.validate()?;
    let train = cfg.effective_train();
    let (tr, log) = match cfg.model.kind {
        ModelKind::Rf | ModelKind::Vrfno => {
            let mut tr = Trainer::new(train.clone())?;
            let log = tr.run(&BatchSource::Target(&cfg.data))?;
            (tr, log)
        }
        ModelKind::Reflow => {
            let mut first = Trainer::new(train.clone())?;
            first.run(&BatchSource::Target(&cfg.data))?;
            let mut rng = RngStream::new(train.seed).fork("reflow.generate");
            let couplings = reflow_generate_couplings(
                &first.model.field,
                cfg.reflow.pairs,
                cfg.reflow.generation_steps,
                &mut rng,
            )?;
            let mut tr = Trainer::new(TrainConfig {
                noise_optimization: false,
                ..train.clone()
            })?;
            let log = tr.run(&BatchSource::Couplings(&couplings))?;
            (tr, log)
        }
    };
    Ok(Trained {
        header: CheckpointHeader {
            kind: cfg.model.kind,
            iteration: tr.iteration,
            optimizer_step: tr.optimizer.step,
            train,
        },
        model: tr.model,
        optimizer: tr.optimizer,
        log,
    })
}

/// `train`: checkpoint, loss log, config echo and manifest under `out`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<(Trained, RunManifest)> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let trained = train_model(cfg)?;
    let mut manifest = RunManifest::new("train", cfg);
    let ckpt = out.join("checkpoint.bin");
    checkpoint::save(&ckpt, &trained.header, &trained.model, &trained.optimizer)?;
    manifest.add("checkpoint", &ckpt);
    let loss = out.join("loss.csv");
    write_loss_csv(&loss, &trained.log)?;
    manifest.add("loss_log", &loss);
    let echo = out.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()?)?;
    manifest.add("config", &echo);
    let manifest = manifest.finish(&out.join("manifest.json"), started)?;
    Ok((trained, manifest))
}

/// Endpoints and trajectories under `cfg.sample`. In reparameterized mode
/// the encoder references are drawn from a fresh target sample of size
/// `count`.
pub fn sample_model(model: &Model, cfg: &ExperimentConfig) -> Result<(crate::autodiff::Tensor, Trajectory)> {
    let root = RngStream::new(cfg.sample.seed);
    let dataset = match cfg.sample.mode {
        SampleMode::Reparameterized => Some(sample_target(&cfg.data, cfg.sample.count, &mut root.fork("sample.dataset"))?),
        SampleMode::Gaussian => None,
    };
    let (points, traj) = batch_sample(model, dataset.as_ref(), &cfg.sample, &mut root.fork("sample.draw"), true)?;
    Ok((points, traj.expect("trajectories requested")))
}

pub fn run_sample(model: &Model, cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let (points, traj) = sample_model(model, cfg)?;
    let mut manifest = RunManifest::new("sample", cfg);
    let p = out.join("samples.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&p)?);
    write_points_csv(&mut f, &points)?;
    drop(f);
    manifest.add("endpoints", &p);
    let t = out.join("trajectories.csv");
    save_trajectory_csv(&t, &traj)?;
    manifest.add("trajectories", &t);
    manifest.finish(&out.join("manifest.json"), started)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Nfss,
    EndpointGap,
    Marginal,
    Crossing,
    Velgap,
    CouplingExperiment,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Nfss,
        Metric::EndpointGap,
        Metric::Marginal,
        Metric::Crossing,
        Metric::Velgap,
        Metric::CouplingExperiment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Nfss => "nfss",
            Metric::EndpointGap => "endpoint_gap",
            Metric::Marginal => "marginal",
            Metric::Crossing => "crossing",
            Metric::Velgap => "velgap",
            Metric::CouplingExperiment => "coupling_experiment",
        }
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Metric::Nfss | Metric::EndpointGap | Metric::Marginal)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(format!("unknown metric `{s}`; valid metrics: {}", names.join(", ")))
        })
    }
}

/// Source for trajectory-based metrics.
pub enum EvalInput<'a> {
    Model(&'a Model),
    Trajectories(&'a Trajectory),
    None,
}

/// Trajectories for the straightness score, started from the model's
/// own initial law.
pub fn nfss_trajectories(model: &Model, cfg: &ExperimentConfig) -> Result<Trajectory> {
    let m = &cfg.metrics;
    let mut rng = RngStream::new(m.seed).fork("eval.nfss");
    let x0 = model_initial_states(model, &cfg.data, m.nfss_count, &mut rng)?;
    integrate(&model.field, &x0, m.nfss_steps, model.viscous)
}

pub fn evaluate(metric: Metric, input: EvalInput, cfg: &ExperimentConfig) -> Result<Report> {
    let m = &cfg.metrics;
    let root = RngStream::new(m.seed);
    let need_model = || match input {
        EvalInput::Model(model) => Ok(model),
        _ => Err(Error::invalid(format!("metric `{}` needs a checkpoint", metric.name()))),
    };
    match metric {
        Metric::Nfss => {
            let owned;
            let traj = match input {
                EvalInput::Trajectories(t) => t,
                EvalInput::Model(model) => {
                    owned = nfss_trajectories(model, cfg)?;
                    &owned
                }
                EvalInput::None => return Err(Error::invalid("metric `nfss` needs a checkpoint or trajectories")),
            };
            let r = nfss(std::slice::from_ref(traj))?;
            Report::new(metric.name(), r.nfss, &r, cfg)
        }
        Metric::EndpointGap => {
            let model = need_model()?;
            let x0 = model_initial_states(model, &cfg.data, m.gap_count, &mut root.fork("eval.gap"))?;
            let gap = model_endpoint_gap(model, &x0, m.gap_small, m.gap_large)?;
            let values = serde_json::json!({
                "mean_l2_gap": gap,
                "n_small": m.gap_small,
                "n_large": m.gap_large,
                "count": m.gap_count,
            });
            Report::new(metric.name(), gap, &values, cfg)
        }
        Metric::Marginal => {
            let model = need_model()?;
            let checks = marginal_preservation_check(
                model,
                &cfg.data,
                &m.marginal_t,
                m.marginal_n,
                m.marginal_steps,
                m.permutations,
                &mut root.fork("eval.marginal"),
            )?;
            let min_p = checks
                .iter()
                .map(|c| c.report.permutation_p_value)
                .fold(f64::INFINITY, f64::min);
            Report::new(metric.name(), min_p, &checks, cfg)
        }
        Metric::Crossing => {
            let est = crossing_probability_estimate(
                &m.crossing_dims,
                m.crossing_pairs,
                &m.crossing_t_grid(),
                m.crossing_threshold,
                &mut root.fork("eval.crossing"),
            )?;
            let slope = log_frequency_slope(&est);
            let values = serde_json::json!({ "estimates": est, "log_frequency_slope": slope });
            Report::new(metric.name(), slope.unwrap_or(f64::NAN), &values, cfg)
        }
        Metric::Velgap => {
            let gaps = velocity_state_gap_check(&cfg.data, m.velgap_pairs, &m.velgap_t, &mut root.fork("eval.velgap"))?;
            let max_ratio = gaps.iter().map(|g| g.ratio).fold(f64::NEG_INFINITY, f64::max);
            Report::new(metric.name(), max_ratio, &gaps, cfg)
        }
        Metric::CouplingExperiment => {
            let mut exp = m.coupling.clone();
            exp.target = cfg.data.clone();
            exp.seed = m.seed;
            let rows = coupling_reuse_experiment(&exp, None)?;
            let best = rows.iter().map(|r| r.energy_distance).fold(f64::INFINITY, f64::min);
            Report::new(metric.name(), best, &rows, cfg)
        }
    }
}

/// Runs `metric` and writes `<out>/<metric>.json` plus a manifest.
pub fn run_eval(metric: Metric, input: EvalInput, cfg: &ExperimentConfig, out: &Path) -> Result<(Report, RunManifest)> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let report = evaluate(metric, input, cfg)?;
    let path = out.join(format!("{}.json", metric.name()));
    report.save(&path)?;
    let mut manifest = RunManifest::new("eval", cfg);
    manifest.add(metric.name(), &path);
    let manifest = manifest.finish(&out.join("manifest.json"), started)?;
    Ok((report, manifest))
}

/// Renders a trajectory CSV as SVG.
pub fn run_plot(csv: &Path, svg: &Path) -> Result<()> {
    let traj = read_trajectory_csv(csv)?;
    std::fs::write(svg, trajectory_svg(&traj)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StraightnessRow {
    pub kind: ModelKind,
    pub nfss: f64,
    pub endpoint_gap: f64,
    pub final_loss: f64,
}

pub struct StraightnessRun {
    pub rows: Vec<StraightnessRow>,
    pub models: Vec<(ModelKind, Model)>,
    /// Every numeric artifact written, in a fixed order.
    pub artifacts: Vec<PathBuf>,
}

/// Trains 1-RF and VRFNO from `base` and scores each on straightness and
/// on the gap between few- and many-step endpoints. Writes per-model
/// checkpoints, loss logs, reports, a 100-path trajectory CSV and SVG,
/// and a summary table under `out`.
pub fn straightness_comparison(base: &ExperimentConfig, out: &Path) -> Result<StraightnessRun> {
    let mut rows = Vec::new();
    let mut models = Vec::new();
    let mut artifacts = Vec::new();
    for kind in [ModelKind::Rf, ModelKind::Vrfno] {
        let mut cfg = base.clone();
        cfg.model.kind = kind;
        let dir = out.join(kind.name());
        std::fs::create_dir_all(&dir)?;
        let trained = train_model(&cfg)?;
        let ckpt = dir.join("checkpoint.bin");
        checkpoint::save(&ckpt, &trained.header, &trained.model, &trained.optimizer)?;
        let loss = dir.join("loss.csv");
        write_loss_csv(&loss, &trained.log)?;

        let traj = nfss_trajectories(&trained.model, &cfg)?;
        let score = evaluate(Metric::Nfss, EvalInput::Trajectories(&traj), &cfg)?;
        let nfss_path = dir.join("nfss.json");
        score.save(&nfss_path)?;
        let gap = evaluate(Metric::EndpointGap, EvalInput::Model(&trained.model), &cfg)?;
        let gap_path = dir.join("endpoint_gap.json");
        gap.save(&gap_path)?;

        let shown = traj.select(&(0..traj.batch().min(100)).collect::<Vec<_>>())?;
        let csv = dir.join("trajectories.csv");
        save_trajectory_csv(&csv, &shown)?;
        let svg = dir.join("trajectories.svg");
        std::fs::write(&svg, trajectory_svg(&shown)?)?;

        let tail = &trained.log[trained.log.len().saturating_sub(100)..];
        rows.push(StraightnessRow {
            kind,
            nfss: score.headline,
            endpoint_gap: gap.headline,
            final_loss: tail.iter().map(|l| l.total).sum::<f64>() / tail.len().max(1) as f64,
        });
        artifacts.extend([ckpt, loss, nfss_path, gap_path, csv, svg]);
        models.push((kind, trained.model));
    }
    let summary = out.join("straightness.json");
    write_json(&summary, &rows)?;
    artifacts.push(summary);
    Ok(StraightnessRun { rows, models, artifacts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub nfss: f64,
    pub endpoint_gap: f64,
    pub dir: PathBuf,
}

/// Trains and scores one run per seed in `out/seed_<s>`, using up to
/// `jobs` worker threads. Rows come back in seed order regardless of
/// scheduling, and `out/sweep.json` collects them.
pub fn run_sweep(cfg: &ExperimentConfig, seeds: &[u64], jobs: usize, out: &Path) -> Result<Vec<SweepRow>> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    if seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one seed"));
    }
    std::fs::create_dir_all(out)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    let one = |seed: u64| -> Result<SweepRow> {
        let mut c = cfg.clone();
        c.set_seed(seed);
        let dir = out.join(format!("seed_{seed}"));
        let (trained, _) = run_train(&c, &dir)?;
        let (score, _) = run_eval(Metric::Nfss, EvalInput::Model(&trained.model), &c, &dir.join("nfss"))?;
        let (gap, _) = run_eval(Metric::EndpointGap, EvalInput::Model(&trained.model), &c, &dir.join("endpoint_gap"))?;
        Ok(SweepRow {
            seed,
            nfss: score.headline,
            endpoint_gap: gap.headline,
            dir,
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                log::info!("sweep: seed {}", seeds[i]);
                let r = one(seeds[i]);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every seed visited"))
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join("sweep.json"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.train.iterations = 20;
        cfg.train.batch_size = 32;
        cfg.reflow.pairs = 64;
        cfg.reflow.generation_steps = 4;
        cfg.metrics.nfss_count = 20;
        cfg.metrics.nfss_steps = 10;
        cfg.metrics.gap_count = 20;
        cfg.metrics.gap_large = 10;
        cfg.sample.count = 16;
        cfg.sample.steps = 3;
        cfg
    }

    #[test]
    fn metric_names_parse() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        let e = "fid".parse::<Metric>().unwrap_err().to_string();
        assert!(e.contains("nfss") && e.contains("coupling_experiment"), "{e}");
    }

    #[test]
    fn every_model_kind_trains_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        for kind in ModelKind::ALL {
            let mut cfg = tiny();
            cfg.model.kind = kind;
            let out = dir.path().join(kind.name());
            let (trained, manifest) = run_train(&cfg, &out).unwrap();
            assert_eq!(manifest.artifacts.len(), 3);
            let back = checkpoint::load(&out.join("checkpoint.bin")).unwrap();
            assert_eq!(back.header.kind, kind);
            assert_eq!(back.model.encoder.is_some(), kind == ModelKind::Vrfno);
            assert_eq!(back.model.params(), trained.model.params());
        }
    }

    #[test]
    fn zero_iterations_store_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.train.iterations = 0;
        run_train(&cfg, dir.path()).unwrap();
        let back = checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
        let init = Model::new(&cfg.effective_train());
        assert_eq!(back.model.params(), init.params());
        assert_eq!(back.header.iteration, 0);
    }

    #[test]
    fn sampling_writes_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let model = Model::new(&cfg.effective_train());
        for mode in [SampleMode::Gaussian, SampleMode::Reparameterized] {
            let mut c = cfg.clone();
            c.sample.mode = mode;
            let out = dir.path().join(format!("{mode:?}"));
            run_sample(&model, &c, &out).unwrap();
            let pts = std::fs::read_to_string(out.join("samples.csv")).unwrap();
            assert_eq!(pts.lines().count(), 1 + 16);
            let tr = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
            assert_eq!(tr.lines().count(), 1 + 16 * 4);
        }
        let rf = Model::new(&crate::training::TrainConfig::rectified_flow());
        let mut c = cfg;
        c.sample.mode = SampleMode::Reparameterized;
        assert!(run_sample(&rf, &c, dir.path()).is_err());
    }

    #[test]
    fn model_free_metrics_need_no_checkpoint() {
        let mut cfg = tiny();
        cfg.metrics.velgap_pairs = 500;
        cfg.metrics.crossing_pairs = 200;
        cfg.metrics.crossing_dims = vec![2, 4];
        assert!(evaluate(Metric::Velgap, EvalInput::None, &cfg).unwrap().headline <= 1.0);
        let r = evaluate(Metric::Crossing, EvalInput::None, &cfg).unwrap();
        assert_eq!(r.metric, "crossing");
        assert!(evaluate(Metric::EndpointGap, EvalInput::None, &cfg).is_err());
    }

    #[test]
    fn sweep_results_do_not_depend_on_jobs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let serial = run_sweep(&cfg, &[3, 1, 2], 1, a.path()).unwrap();
        let parallel = run_sweep(&cfg, &[3, 1, 2], 3, b.path()).unwrap();
        assert_eq!(serial.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![3, 1, 2]);
        for (x, y) in serial.iter().zip(&parallel) {
            assert_eq!((x.nfss, x.endpoint_gap), (y.nfss, y.endpoint_gap));
            let ca = std::fs::read(x.dir.join("checkpoint.bin")).unwrap();
            assert_eq!(ca, std::fs::read(y.dir.join("checkpoint.bin")).unwrap());
        }
        assert!(run_sweep(&cfg, &[], 2, a.path()).is_err());
    }

    #[test]
    fn straightness_pipeline_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let ra = straightness_comparison(&cfg, a.path()).unwrap();
        let rb = straightness_comparison(&cfg, b.path()).unwrap();
        assert_eq!(ra.rows, rb.rows);
        assert_eq!(ra.artifacts.len(), 13);
        for (x, y) in ra.artifacts.iter().zip(&rb.artifacts) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vrfno::checkpoint;
use vrfno::config::ExperimentConfig;
use vrfno::experiment::{self, EvalInput, Metric};
use vrfno::sampling::{read_trajectory_csv, SampleMode};

#[derive(Parser)]
#[command(name = "vrfno", version, about = "Train, sample and evaluate rectified flows on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model selected in the config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample endpoints and trajectories from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        /// gaussian | reparam
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute one metric and write a JSON report.
    Eval {
        /// nfss | endpoint_gap | marginal | crossing | velgap | coupling_experiment
        #[arg(long)]
        metric: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trajectory CSV scored directly (nfss only).
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a trajectory CSV as SVG.
    Plot {
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score one run per seed.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> vrfno::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.output.dir.clone())
}

fn run(cli: Cli) -> vrfno::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let dir = out_dir(&cfg, out);
            let (trained, manifest) = experiment::run_train(&cfg, &dir)?;
            let last = trained.log.last().map_or(f64::NAN, |l| l.total);
            println!(
                "trained {} for {} iterations; final loss {last:.6}; wrote {} artifacts to {}",
                trained.header.kind,
                trained.header.iteration,
                manifest.artifacts.len(),
                dir.display()
            );
        }
        Command::Sample {
            checkpoint: ckpt,
            config,
            steps,
            count,
            mode,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref(), None)?;
            if let Some(s) = seed {
                cfg.sample.seed = s;
            }
            if let Some(n) = steps {
                cfg.sample.steps = n;
            }
            if let Some(n) = count {
                cfg.sample.count = n;
            }
            if let Some(m) = mode {
                cfg.sample.mode = m.parse::<SampleMode>()?;
            }
            let loaded = checkpoint::load(&ckpt)?;
            let dir = out_dir(&cfg, out);
            let manifest = experiment::run_sample(&loaded.model, &cfg, &dir)?;
            println!(
                "sampled {} points with {} steps ({:?} mode) into {}",
                cfg.sample.count,
                cfg.sample.steps,
                cfg.sample.mode,
                manifest.artifacts[0].path.display()
            );
        }
        Command::Eval {
            metric,
            checkpoint: ckpt,
            trajectories,
            config,
            seed,
            out,
        } => {
            let metric: Metric = metric.parse()?;
            let cfg = load_config(config.as_deref(), seed)?;
            let loaded = ckpt.as_deref().map(checkpoint::load).transpose()?;
            let traj = trajectories.as_deref().map(read_trajectory_csv).transpose()?;
            let input = match (&loaded, &traj) {
                (_, Some(t)) if metric == Metric::Nfss => EvalInput::Trajectories(t),
                (Some(c), _) => EvalInput::Model(&c.model),
                _ => EvalInput::None,
            };
            let dir = out_dir(&cfg, out);
            let (report, _) = experiment::run_eval(metric, input, &cfg, &dir)?;
            println!("{}: {}", report.metric, report.headline);
        }
        Command::Plot { trajectories, out } => {
            experiment::run_plot(&trajectories, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            config,
            seeds,
            jobs,
            out,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let dir = out_dir(&cfg, out);
            for row in experiment::run_sweep(&cfg, &seeds, jobs, &dir)? {
                println!("seed {}: nfss {:.6} endpoint_gap {:.6}", row.seed, row.nfss, row.endpoint_gap);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VRFNO_LOG", "error")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

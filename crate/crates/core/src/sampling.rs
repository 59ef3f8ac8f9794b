//! Euler samplers. Plain sampling feeds a zero history at every step; the
//! viscous sampler feeds back the previous step's prediction.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::{reparameterize_scaled, NoiseScale, VelocityModel};
use crate::rng::RngStream;
use crate::training::Model;

/// A batch of sampler paths on the grid `t_k = k / N`. `states` and
/// `velocities` hold `N + 1` tensors of shape `[batch, dim]`; the final
/// velocity repeats the last prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f32>,
    pub states: Vec<Tensor>,
    pub velocities: Vec<Tensor>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn batch(&self) -> usize {
        self.states[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.states[0].cols()
    }

    pub fn start(&self) -> &Tensor {
        &self.states[0]
    }

    pub fn endpoint(&self) -> &Tensor {
        self.states.last().expect("nonempty")
    }

    /// Keeps only the listed samples.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            times: self.times.clone(),
            states: self.states.iter().map(|s| s.select_rows(idx)).collect::<Result<_>>()?,
            velocities: self.velocities.iter().map(|s| s.select_rows(idx)).collect::<Result<_>>()?,
        })
    }
}

pub fn time_grid(steps: usize) -> Vec<f32> {
    (0..=steps).map(|k| (k as f64 / steps as f64) as f32).collect()
}

fn run<F: FnMut(&Tensor, &Tensor)>(
    model: &dyn VelocityModel,
    x0: &Tensor,
    steps: usize,
    chain_history: bool,
    mut record: F,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    if x0.shape().len() != 2 || x0.cols() != model.data_dim() {
        return Err(Error::shape(
            "euler_sample",
            format!("x0 {:?} for data dim {}", x0.shape(), model.data_dim()),
        ));
    }
    let rows = x0.rows();
    let dt = 1.0 / steps as f64;
    let grid = time_grid(steps);
    let mut acc: Vec<f64> = x0.data().iter().map(|&v| v as f64).collect();
    let mut x = x0.clone();
    let mut history = Tensor::zeros(x0.shape());
    for (k, &t) in grid[..steps].iter().enumerate() {
        let v = model.velocity(&x, &vec![t; rows], &history)?;
        if !v.is_finite() {
            return Err(Error::SamplerDiverged { step: k });
        }
        record(&x, &v);
        acc.iter_mut().zip(v.data()).for_each(|(a, &v)| *a += dt * v as f64);
        x = Tensor::new(x0.shape().to_vec(), acc.iter().map(|&a| a as f32).collect())?;
        if !x.is_finite() {
            return Err(Error::SamplerDiverged { step: k + 1 });
        }
        if chain_history {
            history = v;
        }
    }
    Ok(x)
}

/// Integrates from `x0` over `steps` Euler steps and records every state.
pub fn integrate(model: &dyn VelocityModel, x0: &Tensor, steps: usize, chain_history: bool) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    let end = run(model, x0, steps, chain_history, |x, v| {
        states.push(x.clone());
        velocities.push(v.clone());
    })?;
    states.push(end);
    velocities.push(velocities.last().expect("steps >= 1").clone());
    Ok(Trajectory {
        times: time_grid(steps),
        states,
        velocities,
    })
}

/// Endpoint only, without keeping intermediate states.
pub fn integrate_endpoint(model: &dyn VelocityModel, x0: &Tensor, steps: usize, chain_history: bool) -> Result<Tensor> {
    run(model, x0, steps, chain_history, |_, _| {})
}

pub fn euler_sample(model: &dyn VelocityModel, x0: &Tensor, steps: usize) -> Result<Trajectory> {
    integrate(model, x0, steps, false)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    #[default]
    Gaussian,
    #[serde(alias = "reparam")]
    Reparameterized,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "reparam" | "reparameterized" => Ok(Self::Reparameterized),
            other => Err(Error::invalid(format!("unknown sample mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSelection {
    #[default]
    Random,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub count: usize,
    pub mode: SampleMode,
    pub seed: u64,
    pub selection: RowSelection,
    /// Scale the noise by `sigma` instead of `sigma^2`.
    pub reparam_std: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            count: 1000,
            mode: SampleMode::Gaussian,
            seed: 0,
            selection: RowSelection::Random,
            reparam_std: false,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.count == 0 {
            return Err(Error::Config("steps and count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Initial states: raw noise in gaussian mode, or `eps * sigma^2 + mu`
/// from the encoder applied to `x1_ref` in reparameterized mode. Draws
/// `eps` first, then the encoder perturbation.
pub fn initial_noise(model: &Model, x1_ref: Option<&Tensor>, cfg: &SampleConfig, rng: &mut RngStream) -> Result<Tensor> {
    let d = model.field.spec().data_dim;
    let eps = rng.normal_tensor(cfg.count, d);
    match cfg.mode {
        SampleMode::Gaussian => Ok(eps),
        SampleMode::Reparameterized => {
            let enc = model
                .encoder
                .as_ref()
                .ok_or_else(|| Error::invalid("reparameterized sampling needs a noise encoder"))?;
            let x1 = x1_ref.ok_or_else(|| Error::invalid("reparameterized sampling needs reference data"))?;
            if x1.rows() != cfg.count {
                return Err(Error::shape(
                    "vrfno_sample",
                    format!("{} reference rows for {} samples", x1.rows(), cfg.count),
                ));
            }
            let (mu, s2) = enc.forward(x1, rng)?;
            let scale = if cfg.reparam_std {
                NoiseScale::StdDev
            } else {
                NoiseScale::Variance
            };
            reparameterize_scaled(&eps, &mu, &s2, scale)
        }
    }
}

/// Samples with history chaining when the model was trained with it.
pub fn vrfno_sample(model: &Model, x1_ref: Option<&Tensor>, cfg: &SampleConfig, rng: &mut RngStream) -> Result<Trajectory> {
    cfg.validate()?;
    let x0 = initial_noise(model, x1_ref, cfg, rng)?;
    integrate(&model.field, &x0, cfg.steps, model.viscous)
}

/// Picks reference rows (reparameterized mode only), then samples.
/// Returns the endpoints and, if requested, the full trajectories.
pub fn batch_sample(
    model: &Model,
    dataset: Option<&Tensor>,
    cfg: &SampleConfig,
    rng: &mut RngStream,
    keep_trajectories: bool,
) -> Result<(Tensor, Option<Trajectory>)> {
    cfg.validate()?;
    let x1_ref = match cfg.mode {
        SampleMode::Gaussian => None,
        SampleMode::Reparameterized => {
            let dataset = dataset.ok_or_else(|| Error::invalid("reparameterized sampling needs a dataset"))?;
            let n = dataset.rows();
            let idx: Vec<usize> = match cfg.selection {
                RowSelection::Random => (0..cfg.count).map(|_| rng.index(n)).collect(),
                RowSelection::Sequential => (0..cfg.count).map(|i| i % n).collect(),
            };
            Some(dataset.select_rows(&idx)?)
        }
    };
    let x0 = initial_noise(model, x1_ref.as_ref(), cfg, rng)?;
    if keep_trajectories {
        let traj = integrate(&model.field, &x0, cfg.steps, model.viscous)?;
        Ok((traj.endpoint().clone(), Some(traj)))
    } else {
        Ok((integrate_endpoint(&model.field, &x0, cfg.steps, model.viscous)?, None))
    }
}

pub fn write_points_csv<W: Write>(mut w: W, points: &Tensor) -> Result<()> {
    let header: Vec<String> = (0..points.cols()).map(|j| format!("x{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in points.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// One row per (sample, step): `sample_id,step,t,x0..,v0..`.
pub fn write_trajectory_csv<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    let d = traj.dim();
    let mut header = vec!["sample_id".to_string(), "step".into(), "t".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.extend((0..d).map(|j| format!("v{j}")));
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for i in 0..traj.batch() {
        for (k, &t) in traj.times.iter().enumerate() {
            use std::fmt::Write as _;
            line.clear();
            let _ = write!(line, "{i},{k},{t}");
            for v in traj.states[k].row(i).iter().chain(traj.velocities[k].row(i)) {
                let _ = write!(line, ",{v}");
            }
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn save_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectory_csv(&mut f, traj)?;
    f.flush()?;
    Ok(())
}

/// Parses the trajectory CSV format back. Samples must appear in order
/// with steps `0..=N`, and all must share `N`.
pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path)?;
    parse_trajectory_csv(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn parse_trajectory_csv<R: BufRead>(reader: R, name: &str) -> Result<Trajectory> {
    let err = |line: usize, message: String| Error::Parse {
        path: name.into(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let header = header?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 5 || cols[..3] != ["sample_id", "step", "t"] || (cols.len() - 3) % 2 != 0 {
        return Err(err(1, format!("unexpected header '{}'", header.trim())));
    }
    let d = (cols.len() - 3) / 2;
    // per sample: (times, states, velocities) as flat rows
    let mut samples: Vec<(Vec<f32>, Vec<Vec<f32>>, Vec<Vec<f32>>)> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != 3 + 2 * d {
            return Err(err(lineno, format!("expected {} fields, found {}", 3 + 2 * d, cells.len())));
        }
        let sid: usize = cells[0].parse().map_err(|_| err(lineno, format!("bad sample_id '{}'", cells[0])))?;
        let step: usize = cells[1].parse().map_err(|_| err(lineno, format!("bad step '{}'", cells[1])))?;
        let nums: Vec<f32> = cells[2..]
            .iter()
            .map(|c| c.parse::<f32>().map_err(|_| err(lineno, format!("bad number '{c}'"))))
            .collect::<Result<_>>()?;
        if nums.iter().any(|v| !v.is_finite()) {
            return Err(err(lineno, "non-finite value".into()));
        }
        if sid == samples.len() {
            samples.push(Default::default());
        } else if sid + 1 != samples.len() {
            return Err(err(lineno, format!("sample_id {sid} out of order")));
        }
        let s = samples.last_mut().expect("pushed");
        if step != s.0.len() {
            return Err(err(lineno, format!("step {step} out of order")));
        }
        s.0.push(nums[0]);
        s.1.push(nums[1..1 + d].to_vec());
        s.2.push(nums[1 + d..].to_vec());
    }
    if samples.is_empty() {
        return Err(err(1, "no trajectory rows".into()));
    }
    let len = samples[0].0.len();
    if len < 2 {
        return Err(err(2, "a trajectory needs at least two records".into()));
    }
    if let Some(i) = samples.iter().position(|s| s.0.len() != len) {
        return Err(err(1 + i * len, format!("sample {i} has a different step count")));
    }
    let times = samples[0].0.clone();
    let stack = |k: usize, which: usize| -> Result<Tensor> {
        let data = samples
            .iter()
            .flat_map(|s| if which == 0 { s.1[k].clone() } else { s.2[k].clone() })
            .collect();
        Tensor::new(vec![samples.len(), d], data)
    };
    Ok(Trajectory {
        states: (0..len).map(|k| stack(k, 0)).collect::<Result<_>>()?,
        velocities: (0..len).map(|k| stack(k, 1)).collect::<Result<_>>()?,
        times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    struct Constant(Vec<f32>);

    impl VelocityModel for Constant {
        fn data_dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, x: &Tensor, _t: &[f32], _h: &Tensor) -> Result<Tensor> {
            Tensor::new(x.shape().to_vec(), x.iter_rows().flat_map(|_| self.0.clone()).collect())
        }
    }

    struct Decay;

    impl VelocityModel for Decay {
        fn data_dim(&self) -> usize {
            2
        }
        fn velocity(&self, x: &Tensor, _t: &[f32], _h: &Tensor) -> Result<Tensor> {
            Ok(x.map(|v| -v))
        }
    }

    /// `(1 + |h|) * (1, 0)`, recording every history it sees.
    #[derive(Default)]
    struct HistoryProbe {
        seen: RefCell<Vec<Tensor>>,
        outputs: RefCell<Vec<Tensor>>,
    }

    impl VelocityModel for HistoryProbe {
        fn data_dim(&self) -> usize {
            2
        }
        fn velocity(&self, x: &Tensor, _t: &[f32], h: &Tensor) -> Result<Tensor> {
            self.seen.borrow_mut().push(h.clone());
            let data = h
                .iter_rows()
                .flat_map(|r| {
                    let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
                    [1.0 + n, 0.0]
                })
                .collect();
            let out = Tensor::new(x.shape().to_vec(), data)?;
            self.outputs.borrow_mut().push(out.clone());
            Ok(out)
        }
    }

    fn x0() -> Tensor {
        Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap()
    }

    #[test]
    fn constant_field_is_exact_for_any_step_count() {
        for n in [1, 2, 3, 10, 100] {
            let traj = euler_sample(&Constant(vec![1.0, -3.0]), &x0(), n).unwrap();
            let end = traj.endpoint();
            assert!((end.data()[0] - 1.5).abs() < 1e-6);
            assert!((end.data()[1] + 4.0).abs() < 1e-6);
            assert_eq!(traj.states.len(), n + 1);
        }
    }

    #[test]
    fn decay_matches_closed_form() {
        let traj = euler_sample(&Decay, &x0(), 100).unwrap();
        let f = 0.99f64.powi(100);
        for (e, s) in traj.endpoint().data().iter().zip(x0().data()) {
            assert!((*e as f64 - *s as f64 * f).abs() < 1e-6);
        }
    }

    #[test]
    fn single_step_is_one_evaluation() {
        let probe = HistoryProbe::default();
        let end = integrate_endpoint(&probe, &x0(), 1, true).unwrap();
        assert_eq!(probe.seen.borrow().len(), 1);
        assert!(probe.seen.borrow()[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(end.data(), &[1.5, -1.0, 3.0, 0.25]);
    }

    #[test]
    fn history_is_chained() {
        let probe = HistoryProbe::default();
        let traj = integrate(&probe, &x0(), 5, true).unwrap();
        let seen = probe.seen.borrow();
        let outs = probe.outputs.borrow();
        for i in 1..5 {
            assert_eq!(seen[i], outs[i - 1]);
        }
        assert_eq!(traj.velocities[5], traj.velocities[4]);
    }

    #[test]
    fn two_step_unrolled() {
        let traj = integrate(&HistoryProbe::default(), &x0(), 2, true).unwrap();
        let end = traj.endpoint();
        assert!((end.data()[0] - 2.0).abs() < 1e-6);
        assert!((end.data()[1] + 1.0).abs() < 1e-6);
        let plain = integrate(&HistoryProbe::default(), &x0(), 2, false).unwrap();
        assert!((plain.endpoint().data()[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn grid_is_exact() {
        let g = time_grid(100);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[100], 1.0);
        assert_eq!(g[1].to_string(), "0.01");
        assert_eq!(g[7].to_string(), "0.07");
        assert!(euler_sample(&Decay, &x0(), 0).is_err());
    }

    #[test]
    fn blowup_reports_step() {
        struct Blow;
        impl VelocityModel for Blow {
            fn data_dim(&self) -> usize {
                2
            }
            fn velocity(&self, x: &Tensor, _t: &[f32], _h: &Tensor) -> Result<Tensor> {
                Ok(x.map(|v| v * 1e30))
            }
        }
        match euler_sample(&Blow, &x0(), 10) {
            Err(Error::SamplerDiverged { step }) => assert!(step > 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let traj = integrate(&HistoryProbe::default(), &x0(), 3, true).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sample_id,step,t,x0,x1,v0,v1\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        let back = parse_trajectory_csv(text.as_bytes(), "mem").unwrap();
        assert_eq!(back, traj);

        let bad = text.replacen("0,2,", "0,2,oops", 1);
        match parse_trajectory_csv(bad.as_bytes(), "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(parse_trajectory_csv("".as_bytes(), "mem").is_err());
        assert!(parse_trajectory_csv("sample_id,step,t,x0,x1,v0,v1\n".as_bytes(), "mem").is_err());
    }

    fn tiny_model(encoder: bool) -> Model {
        let cfg = crate::training::TrainConfig {
            noise_optimization: encoder,
            seed: 3,
            ..Default::default()
        };
        let mut m = Model::new(&cfg);
        let last = m.field.layers_mut().last_mut().unwrap();
        last.bias.data_mut().copy_from_slice(&[1.0, 1.0]);
        m
    }

    #[test]
    fn batch_sampling_modes() {
        let m = tiny_model(true);
        let data = Tensor::new(vec![3, 2], vec![5.0, 5.0, 4.0, 6.0, 6.0, 4.0]).unwrap();
        let cfg = SampleConfig {
            steps: 4,
            count: 3,
            seed: 1,
            ..Default::default()
        };
        let a = batch_sample(&m, Some(&data), &cfg, &mut RngStream::new(1), false).unwrap().0;
        let b = batch_sample(&m, Some(&data), &cfg, &mut RngStream::new(1), false).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 2]);
        let other = data.map(|v| -v);
        let c = batch_sample(&m, Some(&other), &cfg, &mut RngStream::new(1), false).unwrap().0;
        assert_eq!(a, c);

        let rcfg = SampleConfig {
            mode: SampleMode::Reparameterized,
            selection: RowSelection::Sequential,
            count: 2,
            ..cfg
        };
        let same = Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap();
        let mut rng = RngStream::new(2);
        let (p, _) = batch_sample(&m, Some(&same), &rcfg, &mut rng, false).unwrap();
        assert_ne!(p.row(0), p.row(1));
        assert!(batch_sample(&m, None, &rcfg, &mut rng, false).is_err());
        assert!(batch_sample(&tiny_model(false), Some(&same), &rcfg, &mut rng, false).is_err());
        assert!(vrfno_sample(&m, None, &rcfg, &mut rng).is_err());
    }
}

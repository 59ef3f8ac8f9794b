use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::data::Couplings;
use crate::error::{Error, Result};
use crate::nets::{reparameterize_on, Encoder, NoiseScale, VelocityField, VelocityModel};

/// `t * x1 + (1 - t) * x0`
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            op: "interpolate",
            detail: format!("t = {t} outside [0, 1]"),
        });
    }
    x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a)
}

/// Row-wise interpolation with one time per row.
pub fn interpolate_rows(x0: &Tensor, x1: &Tensor, t: &[f32]) -> Result<Tensor> {
    if x0.shape() != x1.shape() || t.len() != x0.rows() {
        return Err(Error::shape(
            "interpolate",
            format!("{:?}, {:?}, t[{}]", x0.shape(), x1.shape(), t.len()),
        ));
    }
    let mut out = x0.clone();
    for (r, &tr) in t.iter().enumerate() {
        if !(0.0..=1.0).contains(&tr) {
            return Err(Error::Domain {
                op: "interpolate",
                detail: format!("t = {tr} outside [0, 1]"),
            });
        }
        let b = x1.row(r);
        for (o, &b) in out.row_mut(r).iter_mut().zip(b) {
            *o = tr * b + (1.0 - tr) * *o;
        }
    }
    Ok(out)
}

fn batch_sq_err(pred: &Tensor, target: &Tensor) -> f64 {
    let d = pred.cols();
    pred.data()
        .chunks(d)
        .zip(target.data().chunks(d))
        .map(|(p, q)| p.iter().zip(q).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        / pred.rows() as f64
}

/// Mean over rows of the squared L2 distance between two `[batch, dim]` tensors.
pub fn squared_error_on<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let rows = tape.value(pred).shape()[0];
    let diff = tape.sub(target, pred)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / rows as f64)
}

/// `1/2 * mean(sigma^2 + mu^2 - 1 - log sigma^2)` over batch and dims,
/// taking `log sigma^2` directly.
pub fn kl_on<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let var = tape.exp(logvar)?;
    let mu2 = tape.square(mu)?;
    let a = tape.add(var, mu2)?;
    let b = tape.sub(a, logvar)?;
    let m = tape.mean(b)?;
    let one = tape.constant(Tensor::scalar(T::one()));
    let m = tape.sub(m, one)?;
    tape.scale(m, 0.5)
}

pub fn total_on<T: Real>(tape: &mut Tape<T>, vcl: Var, kll: Option<Var>, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    match kll {
        Some(k) => {
            let k = tape.scale(k, alpha)?;
            tape.add(vcl, k)
        }
        None => Ok(vcl),
    }
}

/// Rectified-flow regression loss `mean ||(x1 - x0) - v(x_t, t, 0)||^2`.
pub fn rf_loss(model: &dyn VelocityModel, batch: &Couplings, t_samples: &[f32]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("rf_loss: empty batch"));
    }
    if t_samples.len() != batch.len() {
        return Err(Error::shape(
            "rf_loss",
            format!("{} couplings vs {} times", batch.len(), t_samples.len()),
        ));
    }
    let xt = interpolate_rows(&batch.x0, &batch.x1, t_samples)?;
    let zeros = Tensor::zeros(batch.x0.shape());
    let v = model.velocity(&xt, t_samples, &zeros)?;
    let v_ref = batch.x1.zip_map(&batch.x0, |a, b| a - b)?;
    Ok(batch_sq_err(&v, &v_ref))
}

/// Velocity consistency loss with squared L2 distance.
pub fn vcl_loss(
    model: &dyn VelocityModel,
    x_t: &Tensor,
    t: &[f32],
    v_history: &Tensor,
    v_ref: &Tensor,
) -> Result<f64> {
    if x_t.shape() != v_history.shape() || x_t.shape() != v_ref.shape() || t.len() != x_t.rows() {
        return Err(Error::shape(
            "vcl_loss",
            format!(
                "x_t {:?}, t[{}], v_history {:?}, v_ref {:?}",
                x_t.shape(),
                t.len(),
                v_history.shape(),
                v_ref.shape()
            ),
        ));
    }
    let v = model.velocity(x_t, t, v_history)?;
    Ok(batch_sq_err(&v, v_ref))
}

pub fn kl_loss(mu: &Tensor, sigma2: &Tensor) -> Result<f64> {
    if mu.shape() != sigma2.shape() {
        return Err(Error::shape("kl_loss", format!("{:?} vs {:?}", mu.shape(), sigma2.shape())));
    }
    if sigma2.data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain {
            op: "kl_loss",
            detail: "sigma^2 must be strictly positive".into(),
        });
    }
    let sum: f64 = mu
        .data()
        .iter()
        .zip(sigma2.data())
        .map(|(&m, &s)| {
            let (m, s) = (m as f64, s as f64);
            s + m * m - 1.0 - s.ln()
        })
        .sum();
    Ok(0.5 * sum / mu.numel() as f64)
}

pub fn total_loss(vcl: f64, kll: f64, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(vcl + alpha * kll)
}

/// Random draws consumed by one joint-loss evaluation. Fixing them makes
/// the loss a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct StepNoise<T = f32> {
    /// Raw noise `[batch, dim]`; used as `x0` directly when no encoder runs.
    pub eps: Tensor<T>,
    /// Scaled encoder perturbation `[batch, hidden]`.
    pub tau: Option<Tensor<T>>,
    /// Per-row time.
    pub t: Vec<T>,
}

impl StepNoise<f32> {
    pub fn to_f64(&self) -> StepNoise<f64> {
        StepNoise {
            eps: self.eps.to_f64(),
            tau: self.tau.as_ref().map(Tensor::to_f64),
            t: self.t.iter().map(|&v| v as f64).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOptions {
    pub alpha: f64,
    pub delta_t: f64,
    /// Feed `stopgrad(v(x_{t-dt}, t-dt, 0))` as the history input; zeros otherwise.
    pub history: bool,
    pub noise_scale: NoiseScale,
    /// Weight of an extra regression of the zero-history evaluation
    /// `v(x_{t-dt}, t-dt, 0)` onto `v_ref`; 0 disables it.
    pub zero_history_weight: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub vcl: Var,
    pub kll: Option<Var>,
    pub total: Var,
    /// Zero-history regression term, when enabled.
    pub anchor: Option<Var>,
    /// The (detached) history input actually fed to the field.
    pub history: Var,
}

fn expand_rows<T: Real>(t: &[T], cols: usize, f: impl Fn(T) -> T) -> Tensor<T> {
    let data = t.iter().flat_map(|&v| std::iter::repeat(f(v)).take(cols)).collect();
    Tensor::new(vec![t.len(), cols], data).expect("nonempty")
}

/// Records the joint loss `VCL + alpha * KLL` on `tape`.
///
/// With an encoder, `x0 = eps * sigma^2 + mu` from `E(x1)`; without one,
/// `x0 = eps`. `frozen_history` replaces the history evaluation with a
/// fixed value (used by finite-difference oracles).
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_on<T: Real>(
    tape: &mut Tape<T>,
    vf: &VelocityField,
    vf_params: &[Var],
    encoder: Option<(&Encoder, &[Var])>,
    x1: &Tensor<T>,
    noise: &StepNoise<T>,
    opts: &LossOptions,
    frozen_history: Option<&Tensor<T>>,
) -> Result<LossVars> {
    let rows = x1.rows();
    let d = x1.cols();
    if noise.eps.shape() != x1.shape() || noise.t.len() != rows {
        return Err(Error::shape(
            "joint_loss",
            format!("x1 {:?}, eps {:?}, t[{}]", x1.shape(), noise.eps.shape(), noise.t.len()),
        ));
    }
    let x1v = tape.constant(x1.clone());
    let eps = tape.constant(noise.eps.clone());
    let (x0, kll) = match encoder {
        Some((enc, params)) => {
            let (mu, logvar) = enc.forward_on(tape, params, x1v, noise.tau.as_ref())?;
            let x0 = reparameterize_on(tape, eps, mu, logvar, opts.noise_scale)?;
            (x0, Some(kl_on(tape, mu, logvar)?))
        }
        None => (eps, None),
    };
    let interp = |tape: &mut Tape<T>, shift: T| -> Result<Var> {
        let tx1: Vec<T> = x1
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (noise.t[i / d] - shift) * v)
            .collect();
        let tx1 = tape.constant(Tensor::new(vec![rows, d], tx1)?);
        let w0 = tape.constant(expand_rows(&noise.t, d, |t| T::one() - t + shift));
        let a = tape.mul(w0, x0)?;
        tape.add(tx1, a)
    };

    let v_ref = tape.sub(x1v, x0)?;
    let mut anchor = None;
    let history = if opts.history {
        let with_anchor = opts.zero_history_weight > 0.0;
        let v_prev = if frozen_history.is_none() || with_anchor {
            let dt = T::of(opts.delta_t);
            let x_prev = interp(tape, dt)?;
            let t_prev = tape.constant(expand_rows(&noise.t, 1, |t| t - dt));
            let zeros = tape.constant(Tensor::zeros(&[rows, d]));
            Some(vf.forward_on(tape, vf_params, x_prev, t_prev, zeros)?)
        } else {
            None
        };
        if let (true, Some(vp)) = (with_anchor, v_prev) {
            anchor = Some(squared_error_on(tape, vp, v_ref)?);
        }
        match (frozen_history, v_prev) {
            (Some(h), _) => tape.constant(h.clone()),
            (None, Some(vp)) => tape.detach(vp),
            (None, None) => unreachable!("history evaluated above"),
        }
    } else {
        tape.constant(Tensor::zeros(&[rows, d]))
    };

    let xt = interp(tape, T::zero())?;
    let tcol = tape.constant(expand_rows(&noise.t, 1, |t| t));
    let v = vf.forward_on(tape, vf_params, xt, tcol, history)?;
    let vcl = squared_error_on(tape, v, v_ref)?;
    let mut total = total_on(tape, vcl, kll, opts.alpha)?;
    if let Some(a) = anchor {
        let w = tape.scale(a, opts.zero_history_weight)?;
        total = tape.add(total, w)?;
    }
    Ok(LossVars {
        vcl,
        kll,
        total,
        anchor,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CouplingKind;

    struct Constant(Vec<f32>);

    impl VelocityModel for Constant {
        fn data_dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, x: &Tensor, _t: &[f32], _h: &Tensor) -> Result<Tensor> {
            Tensor::new(x.shape().to_vec(), x.iter_rows().flat_map(|_| self.0.clone()).collect())
        }
    }

    /// Returns `history + offset` so the VCL can be driven exactly.
    struct Echo(Vec<f32>);

    impl VelocityModel for Echo {
        fn data_dim(&self) -> usize {
            self.0.len()
        }
        fn velocity(&self, _x: &Tensor, _t: &[f32], h: &Tensor) -> Result<Tensor> {
            let mut out = h.clone();
            for r in 0..out.rows() {
                out.row_mut(r).iter_mut().zip(&self.0).for_each(|(o, &c)| *o += c);
            }
            Ok(out)
        }
    }

    fn t2(rows: &[[f32; 2]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn interpolate_boundaries_and_midpoint() {
        let x0 = t2(&[[0.0, 0.0]]);
        let x1 = t2(&[[2.0, 2.0]]);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(interpolate(&x0, &x1, 0.5).unwrap().data(), &[1.0, 1.0]);
        assert!(interpolate(&x0, &x1, 1.2).is_err());
        assert!(interpolate_rows(&x0, &x1, &[-0.1]).is_err());
    }

    #[test]
    fn rf_loss_with_stub_fields() {
        let x0 = t2(&[[0.0, 0.0], [1.0, -1.0]]);
        let x1 = t2(&[[3.0, 4.0], [4.0, 3.0]]);
        let batch = Couplings::new(x0, x1, CouplingKind::Arbitrary).unwrap();
        let t = [0.3, 0.8];
        // every chord is (3, 4)
        assert_eq!(rf_loss(&Constant(vec![3.0, 4.0]), &batch, &t).unwrap(), 0.0);
        // zero field: mean ||x1 - x0||^2 = 25
        assert!((rf_loss(&Constant(vec![0.0, 0.0]), &batch, &t).unwrap() - 25.0).abs() < 1e-6);
        // (1, 2): ||(2, 2)||^2 = 8 for both rows
        assert!((rf_loss(&Constant(vec![1.0, 2.0]), &batch, &t).unwrap() - 8.0).abs() < 1e-6);
        assert!(rf_loss(&Constant(vec![0.0, 0.0]), &batch, &[0.1]).is_err());
    }

    #[test]
    fn vcl_examples() {
        let x = t2(&[[0.5, 0.1], [0.2, -0.4], [1.0, 1.0]]);
        let v_ref = t2(&[[1.0, 2.0], [-1.0, 0.0], [0.3, 0.3]]);
        let t = [0.2, 0.5, 0.9];
        assert_eq!(vcl_loss(&Echo(vec![0.0, 0.0]), &x, &t, &v_ref, &v_ref).unwrap(), 0.0);
        assert!((vcl_loss(&Echo(vec![1.0, 0.0]), &x, &t, &v_ref, &v_ref).unwrap() - 1.0).abs() < 1e-6);
        // history zero, offset (0.5, -1): residuals (0.5,-3), (1.5,-1), (0.2,-1.3)
        let h = Tensor::zeros(&[3, 2]);
        let want = ((0.25 + 9.0) + (2.25 + 1.0) + (0.04 + 1.69)) / 3.0;
        let got = vcl_loss(&Echo(vec![0.5, -1.0]), &x, &t, &h, &v_ref).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!(vcl_loss(&Echo(vec![0.0, 0.0]), &x, &t[..2], &h, &v_ref).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let z = Tensor::zeros(&[3, 2]);
        let one = Tensor::full(&[3, 2], 1.0f32);
        assert!(kl_loss(&z, &one).unwrap().abs() < 1e-12);
        assert!((kl_loss(&one, &one).unwrap() - 0.5).abs() < 1e-9);
        let e = Tensor::full(&[3, 2], std::f32::consts::E);
        let want = (std::f64::consts::E - 2.0) / 2.0;
        assert!((kl_loss(&z, &e).unwrap() - want).abs() < 1e-6);
        assert!(kl_loss(&z, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn kl_nonnegative_on_grid_with_unique_zero() {
        for mi in -20..=20 {
            for si in 1..=40 {
                let m = mi as f32 * 0.1;
                let s = si as f32 * 0.1;
                let k = kl_loss(&Tensor::full(&[1, 1], m), &Tensor::full(&[1, 1], s)).unwrap();
                assert!(k >= -1e-12);
                if k < 1e-12 {
                    assert!(mi == 0 && si == 10, "zero at mu={m}, s2={s}");
                }
            }
        }
    }

    #[test]
    fn kl_tape_matches_plain() {
        let mu = Tensor::new(vec![2, 2], vec![0.3, -1.0, 0.0, 2.0]).unwrap();
        let lv = Tensor::new(vec![2, 2], vec![0.0, 1.0, -0.5, 0.2]).unwrap();
        let mut tape = Tape::<f32>::new();
        let (m, l) = (tape.constant(mu.clone()), tape.constant(lv.clone()));
        let k = kl_on(&mut tape, m, l).unwrap();
        let plain = kl_loss(&mu, &lv.map(f32::exp)).unwrap();
        assert!((tape.value(k).item() as f64 - plain).abs() < 1e-6);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(2.0, 4.0, 0.5).unwrap(), 4.0);
        assert_eq!(total_loss(2.0, 4.0, 0.0).unwrap(), 2.0);
        assert!(total_loss(2.0, 4.0, -1.0).is_err());
    }
}

//! The two trainable networks: the velocity field `v(x_t, t, v_history)`
//! and the noise encoder `x1 -> (mu, sigma^2)`, plus the reparameterization
//! that turns raw Gaussian noise into encoder-adapted noise.

use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Affine layer `x @ weight + bias`, weight `[in, out]`, bias `[1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape").with_requires_grad(),
            bias: Tensor::zeros(&[1, fan_out]).with_requires_grad(),
        }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]).with_requires_grad(),
            bias: Tensor::zeros(&[1, fan_out]).with_requires_grad(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.fan_in() {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", x.shape(), self.weight.shape()),
            ));
        }
        let (m, k, n) = (x.rows(), self.fan_in(), self.fan_out());
        let mut out = matmul(x.data(), self.weight.data(), m, k, n);
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(self.bias.data()).for_each(|(o, &b)| *o += b);
        }
        Tensor::new(vec![m, n], out)
    }

    fn forward_on<T: Real>(tape: &mut Tape<T>, w: Var, b: Var, x: Var) -> Result<Var> {
        let rows = tape.value(x).shape()[0];
        let ones = tape.constant(Tensor::full(&[rows, 1], T::one()));
        let z = tape.matmul(x, w)?;
        let bias = tape.matmul(ones, b)?;
        tape.add(z, bias)
    }
}

fn tanh_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.tanh());
}

/// Registers a parameter list on a tape, cast to the tape's precision.
pub fn register_params<T: Real>(tape: &mut Tape<T>, params: &[&Tensor]) -> Vec<Var> {
    params.iter().map(|p| tape.param(&p.cast::<T>())).collect()
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and zero biases for
/// each `(fan_in, fan_out)` pair, as `[w0, b0, w1, b1, ...]`.
pub fn init_params(layers: &[(usize, usize)], seed: u64) -> Vec<Tensor> {
    let mut rng = RngStream::new(seed);
    layers
        .iter()
        .flat_map(|&(i, o)| {
            let l = Linear::init(i, o, &mut rng);
            [l.weight, l.bias]
        })
        .collect()
}

fn check_batch(op: &'static str, dim: usize, ts: &[&Tensor]) -> Result<usize> {
    let rows = ts[0].shape()[0];
    for t in ts {
        if t.shape().len() != 2 || t.shape()[0] != rows {
            return Err(Error::shape(
                op,
                ts.iter()
                    .map(|t| format!("{:?}", t.shape()))
                    .collect::<Vec<_>>()
                    .join(", "),
            ));
        }
    }
    if ts[0].shape()[1] != dim {
        return Err(Error::shape(op, format!("expected data dim {dim}, got {:?}", ts[0].shape())));
    }
    Ok(rows)
}

fn check_time<T: Real>(t: &[T]) -> Result<()> {
    let eps = T::of(1e-6);
    if let Some(bad) = t.iter().find(|&&v| !(v >= -eps && v <= T::one() + eps)) {
        return Err(Error::Domain {
            op: "velocity_forward",
            detail: format!("time {bad:?} outside [0, 1]"),
        });
    }
    Ok(())
}

/// Anything the Euler samplers can integrate: a map from
/// `(state [batch, dim], per-row time, history [batch, dim])` to a velocity.
pub trait VelocityModel {
    fn data_dim(&self) -> usize;
    fn velocity(&self, x: &Tensor, t: &[f32], history: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VelocityFieldSpec {
    pub data_dim: usize,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for VelocityFieldSpec {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 64,
            depth: 3,
        }
    }
}

/// Tanh MLP over `[x_t, t, v_history]` with a zero-initialized output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    spec: VelocityFieldSpec,
    layers: Vec<Linear>,
}

impl VelocityField {
    pub fn new(spec: VelocityFieldSpec, seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let input = 2 * spec.data_dim + 1;
        let mut layers = Vec::with_capacity(spec.depth + 1);
        let mut fan_in = input;
        for _ in 0..spec.depth {
            layers.push(Linear::init(fan_in, spec.hidden, &mut rng));
            fan_in = spec.hidden;
        }
        layers.push(Linear::zeroed(fan_in, spec.data_dim));
        Self { spec, layers }
    }

    pub fn spec(&self) -> VelocityFieldSpec {
        self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("vf.{i}.weight"), format!("vf.{i}.bias")])
            .collect()
    }

    /// `v(x_t, t, v_history)` for a batch; `t` is `[batch, 1]`.
    pub fn forward(&self, x_t: &Tensor, t: &Tensor, v_history: &Tensor) -> Result<Tensor> {
        let d = self.spec.data_dim;
        let rows = check_batch("velocity_forward", d, &[x_t, t, v_history])?;
        if t.shape()[1] != 1 || v_history.shape()[1] != d {
            return Err(Error::shape(
                "velocity_forward",
                format!("t {:?}, v_history {:?}", t.shape(), v_history.shape()),
            ));
        }
        check_time(t.data())?;
        let width = 2 * d + 1;
        let mut input = Vec::with_capacity(rows * width);
        for r in 0..rows {
            input.extend_from_slice(x_t.row(r));
            input.push(t.data()[r]);
            input.extend_from_slice(v_history.row(r));
        }
        let mut h = Tensor::new(vec![rows, width], input)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval(&h)?;
            if i < last {
                tanh_inplace(&mut h);
            }
        }
        Ok(h)
    }

    /// Tape version of [`forward`](Self::forward); `params` come from
    /// [`register_params`] over [`params`](Self::params).
    pub fn forward_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x_t: Var,
        t: Var,
        v_history: Var,
    ) -> Result<Var> {
        check_time(tape.value(t).data())?;
        let mut h = tape.concat(&[x_t, t, v_history])?;
        let last = self.layers.len() - 1;
        for (i, pair) in params.chunks(2).enumerate() {
            h = Linear::forward_on(tape, pair[0], pair[1], h)?;
            if i < last {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

impl VelocityModel for VelocityField {
    fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    fn velocity(&self, x: &Tensor, t: &[f32], history: &Tensor) -> Result<Tensor> {
        let tt = Tensor::new(vec![t.len(), 1], t.to_vec())?;
        self.forward(x, &tt, history)
    }
}

/// How the reparameterization scales the raw noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `x0 = eps * sigma^2 + mu`
    #[default]
    Variance,
    /// `x0 = eps * sigma + mu`
    StdDev,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub data_dim: usize,
    pub hidden: usize,
    pub perturbation_scale: f32,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: 16,
            perturbation_scale: 0.1,
        }
    }
}

/// Two tanh layers, then separate affine heads for `mu` and `log sigma^2`.
/// Scaled Gaussian noise is added after the first hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    pub trunk: [Linear; 2],
    pub mu_head: Linear,
    pub logvar_head: Linear,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let h = spec.hidden;
        Self {
            spec,
            trunk: [
                Linear::init(spec.data_dim, h, &mut rng),
                Linear::init(h, h, &mut rng),
            ],
            mu_head: Linear::init(h, spec.data_dim, &mut rng),
            logvar_head: Linear::init(h, spec.data_dim, &mut rng),
        }
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    pub fn perturbation_scale(&self) -> f32 {
        self.spec.perturbation_scale
    }

    pub fn set_perturbation_scale(&mut self, s: f32) {
        self.spec.perturbation_scale = s;
    }

    pub fn params(&self) -> Vec<&Tensor> {
        [&self.trunk[0], &self.trunk[1], &self.mu_head, &self.logvar_head]
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let [t0, t1] = &mut self.trunk;
        [t0, t1, &mut self.mu_head, &mut self.logvar_head]
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        ["enc.trunk.0", "enc.trunk.1", "enc.mu", "enc.logvar"]
            .iter()
            .flat_map(|p| [format!("{p}.weight"), format!("{p}.bias")])
            .collect()
    }

    /// Draws the scaled mid-network perturbation for a batch, or `None`
    /// when the scale is zero (no draws are consumed).
    pub fn draw_perturbation(&self, rows: usize, rng: &mut RngStream) -> Option<Tensor> {
        let s = self.spec.perturbation_scale;
        (s > 0.0).then(|| rng.normal_tensor(rows, self.spec.hidden).map(|v| v * s))
    }

    /// `(mu, sigma^2)` for a batch of data points.
    pub fn forward(&self, x1: &Tensor, rng: &mut RngStream) -> Result<(Tensor, Tensor)> {
        let rows = check_batch("encoder_forward", self.spec.data_dim, &[x1])?;
        if !x1.is_finite() {
            return Err(Error::NonFinite { op: "encoder_forward" });
        }
        let tau = self.draw_perturbation(rows, rng);
        self.forward_with(x1, tau.as_ref())
    }

    /// Forward pass with an explicit (already scaled) perturbation.
    pub fn forward_with(&self, x1: &Tensor, tau: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut h = self.trunk[0].eval(x1)?;
        tanh_inplace(&mut h);
        if let Some(tau) = tau {
            h = h.zip_map(tau, |a, b| a + b)?;
        }
        let mut h = self.trunk[1].eval(&h)?;
        tanh_inplace(&mut h);
        let mu = self.mu_head.eval(&h)?;
        let sigma2 = self.logvar_head.eval(&h)?.map(f32::exp);
        Ok((mu, sigma2))
    }

    /// Tape version returning `(mu, log sigma^2)`.
    pub fn forward_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        x1: Var,
        tau: Option<&Tensor<T>>,
    ) -> Result<(Var, Var)> {
        let mut h = Linear::forward_on(tape, params[0], params[1], x1)?;
        h = tape.tanh(h)?;
        if let Some(tau) = tau {
            let tau = tape.constant(tau.clone());
            h = tape.add(h, tau)?;
        }
        h = Linear::forward_on(tape, params[2], params[3], h)?;
        h = tape.tanh(h)?;
        let mu = Linear::forward_on(tape, params[4], params[5], h)?;
        let logvar = Linear::forward_on(tape, params[6], params[7], h)?;
        Ok((mu, logvar))
    }
}

/// `x0 = eps * sigma^2 + mu`, elementwise.
pub fn reparameterize(eps: &Tensor, mu: &Tensor, sigma2: &Tensor) -> Result<Tensor> {
    reparameterize_scaled(eps, mu, sigma2, NoiseScale::Variance)
}

pub fn reparameterize_scaled(
    eps: &Tensor,
    mu: &Tensor,
    sigma2: &Tensor,
    scale: NoiseScale,
) -> Result<Tensor> {
    if eps.shape() != mu.shape() || mu.shape() != sigma2.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("{:?}, {:?}, {:?}", eps.shape(), mu.shape(), sigma2.shape()),
        ));
    }
    if sigma2.data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain {
            op: "reparameterize",
            detail: "sigma^2 must be strictly positive".into(),
        });
    }
    let data = eps
        .data()
        .iter()
        .zip(mu.data())
        .zip(sigma2.data())
        .map(|((&e, &m), &s)| match scale {
            NoiseScale::Variance => e * s + m,
            NoiseScale::StdDev => e * s.sqrt() + m,
        })
        .collect();
    Tensor::new(eps.shape().to_vec(), data)
}

/// Tape form of the reparameterization, taking `log sigma^2`.
pub fn reparameterize_on<T: Real>(
    tape: &mut Tape<T>,
    eps: Var,
    mu: Var,
    logvar: Var,
    scale: NoiseScale,
) -> Result<Var> {
    let s = match scale {
        NoiseScale::Variance => tape.exp(logvar)?,
        NoiseScale::StdDev => {
            let half = tape.scale(logvar, 0.5)?;
            tape.exp(half)?
        }
    };
    let noise = tape.mul(eps, s)?;
    tape.add(noise, mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;

    fn tensor(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_zero_velocity() {
        let vf = VelocityField::new(VelocityFieldSpec::default(), 1);
        let mut rng = RngStream::new(5);
        let x = rng.normal_tensor(7, 2);
        let h = rng.normal_tensor(7, 2);
        let t = Tensor::full(&[7, 1], 0.3);
        let v = vf.forward(&x, &t, &h).unwrap();
        assert_eq!(v.shape(), &[7, 2]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    fn randomized_field(seed: u64) -> VelocityField {
        let mut vf = VelocityField::new(VelocityFieldSpec::default(), seed);
        let mut rng = RngStream::new(seed + 100);
        let last = vf.layers.len() - 1;
        vf.layers[last] = Linear::init(64, 2, &mut rng);
        vf
    }

    #[test]
    fn velocity_rows_are_batch_independent() {
        let vf = randomized_field(2);
        let mut rng = RngStream::new(9);
        let x = rng.normal_tensor(8, 2);
        let h = rng.normal_tensor(8, 2);
        let t = Tensor::new(vec![8, 1], (0..8).map(|i| i as f32 / 8.0).collect()).unwrap();
        let full = vf.forward(&x, &t, &h).unwrap();
        for r in [0, 3, 7] {
            let one = vf
                .forward(
                    &x.select_rows(&[r]).unwrap(),
                    &t.select_rows(&[r]).unwrap(),
                    &h.select_rows(&[r]).unwrap(),
                )
                .unwrap();
            assert_eq!(one.data(), full.row(r));
        }
    }

    #[test]
    fn velocity_forward_is_deterministic() {
        let a = randomized_field(4);
        let b = randomized_field(4);
        let x = tensor(&[2, 2], &[0.1, 0.2, -0.3, 1.5]);
        let t = tensor(&[2, 1], &[0.0, 1.0]);
        let va = a.forward(&x, &t, &x).unwrap();
        let vb = b.forward(&x, &t, &x).unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn velocity_rejects_time_outside_unit_interval() {
        let vf = VelocityField::new(VelocityFieldSpec::default(), 1);
        let x = Tensor::zeros(&[1, 2]);
        let t = tensor(&[1, 1], &[1.5]);
        assert!(matches!(vf.forward(&x, &t, &x), Err(Error::Domain { .. })));
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let vf = randomized_field(8);
        let mut rng = RngStream::new(1);
        let x = rng.normal_tensor(5, 2);
        let h = rng.normal_tensor(5, 2);
        let t = Tensor::full(&[5, 1], 0.6);
        let plain = vf.forward(&x, &t, &h).unwrap();
        let mut tape = Tape::<f32>::new();
        let p = register_params(&mut tape, &vf.params());
        let (xv, tv, hv) = (tape.constant(x), tape.constant(t), tape.constant(h));
        let out = vf.forward_on(&mut tape, &p, xv, tv, hv).unwrap();
        for (a, b) in plain.data().iter().zip(tape.value(out).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn velocity_parameter_gradients_pass_grad_check() {
        let vf = randomized_field(12);
        let mut rng = RngStream::new(3);
        let x = rng.normal_tensor(4, 2).to_f64();
        let h = rng.normal_tensor(4, 2).to_f64();
        let t = Tensor::new(vec![4, 1], vec![0.1, 0.4, 0.7, 0.95]).unwrap();
        let params: Vec<Tensor<f64>> = vf.params().iter().map(|p| p.to_f64()).collect();
        let f = |tape: &mut Tape<f64>, p: &[Var]| {
            let (xv, tv, hv) = (
                tape.constant(x.clone()),
                tape.constant(t.clone()),
                tape.constant(h.clone()),
            );
            let v = vf.forward_on(tape, p, xv, tv, hv)?;
            let sq = tape.square(v)?;
            tape.mean(sq)
        };
        let err = grad_check(f, &params, 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn encoder_is_deterministic_without_perturbation() {
        let enc = Encoder::new(
            EncoderSpec {
                perturbation_scale: 0.0,
                ..Default::default()
            },
            3,
        );
        let mut rng = RngStream::new(1);
        let x1 = rng.normal_tensor(6, 2);
        let a = enc.forward(&x1, &mut rng).unwrap();
        let b = enc.forward(&x1, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a.1.data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn encoder_perturbation_changes_output() {
        let enc = Encoder::new(EncoderSpec::default(), 3);
        let mut rng = RngStream::new(1);
        let x1 = rng.normal_tensor(6, 2);
        let a = enc.forward(&x1, &mut rng).unwrap();
        let b = enc.forward(&x1, &mut rng).unwrap();
        assert_ne!(a.0, b.0);
        assert_ne!(a.1, b.1);
    }

    #[test]
    fn zeroed_heads_give_standard_normal_parameters() {
        let mut enc = Encoder::new(EncoderSpec::default(), 3);
        enc.mu_head = Linear::zeroed(16, 2);
        enc.logvar_head = Linear::zeroed(16, 2);
        let mut rng = RngStream::new(2);
        let x1 = rng.normal_tensor(5, 2).map(|v| v * 10.0);
        let (mu, s2) = enc.forward(&x1, &mut rng).unwrap();
        assert!(mu.data().iter().all(|&m| m == 0.0));
        assert!(s2.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn reparameterize_examples() {
        let eps = tensor(&[1, 2], &[1.0, -1.0]);
        let mu = tensor(&[1, 2], &[0.5, 0.5]);
        let s2 = tensor(&[1, 2], &[2.0, 0.5]);
        assert_eq!(reparameterize(&eps, &mu, &s2).unwrap().data(), &[2.5, 0.0]);

        let zero = Tensor::zeros(&[1, 2]);
        assert_eq!(reparameterize(&zero, &mu, &s2).unwrap(), mu);
        let one = Tensor::full(&[1, 2], 1.0);
        assert_eq!(reparameterize(&eps, &zero, &one).unwrap(), eps);

        let bad = tensor(&[1, 2], &[1.0, 0.0]);
        assert!(reparameterize(&eps, &mu, &bad).is_err());

        let std = reparameterize_scaled(&eps, &mu, &tensor(&[1, 2], &[4.0, 0.25]), NoiseScale::StdDev).unwrap();
        assert_eq!(std.data(), &[2.5, 0.0]);
    }

    #[test]
    fn init_params_is_seeded_and_bounded() {
        let a = init_params(&[(64, 64), (64, 2)], 5);
        let b = init_params(&[(64, 64), (64, 2)], 5);
        let c = init_params(&[(64, 64), (64, 2)], 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a[0].data().iter().all(|v| v.abs() <= 0.125));
        assert!(a[1].data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn reparameterize_is_affine_in_noise(
            e in proptest::collection::vec(-3.0f32..3.0, 4),
            m in proptest::collection::vec(-3.0f32..3.0, 4),
            s in proptest::collection::vec(0.01f32..4.0, 4),
            a in -4.0f32..4.0,
        ) {
            let eps = tensor(&[2, 2], &e);
            let mu = tensor(&[2, 2], &m);
            let s2 = tensor(&[2, 2], &s);
            let lhs = reparameterize(&eps.map(|v| a * v), &mu, &s2).unwrap();
            let rhs = reparameterize(&eps, &mu, &s2).unwrap();
            for ((l, r), mm) in lhs.data().iter().zip(rhs.data()).zip(mu.data()) {
                prop_assert!(((l - mm) - a * (r - mm)).abs() < 1e-4);
            }
        }

        #[test]
        fn encoder_variance_positive(xs in proptest::collection::vec(-50.0f32..50.0, 6)) {
            let enc = Encoder::new(EncoderSpec::default(), 1);
            let mut rng = RngStream::new(0);
            let (_, s2) = enc.forward(&tensor(&[3, 2], &xs), &mut rng).unwrap();
            prop_assert!(s2.data().iter().all(|&s| s > 0.0));
        }
    }
}

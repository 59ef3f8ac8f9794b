use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn eval_scalar<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::shape(
            "grad_check",
            format!("function output must be scalar, got {:?}", v.shape()),
        ));
    }
    Ok(v.item())
}

/// Reverse-mode gradient of `f` with respect to every tensor in `params`.
pub fn ad_gradient<F>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::shape(
            "grad_check",
            format!("function output must be scalar, got {:?}", tape.value(out).shape()),
        ));
    }
    tape.backward(out)?;
    Ok(vars.iter().map(|&v| tape.grad_tensor(v).into_data()).collect())
}

/// Central finite-difference gradient, one coordinate at a time.
pub fn fd_gradient<F>(f: &F, params: &[Tensor<f64>], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = vec![0.0; params[pi].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = eval_scalar(f, &work)?;
            work[pi].data_mut()[j] = orig - h;
            let minus = eval_scalar(f, &work)?;
            work[pi].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Max over coordinates of `|ad - fd| / (|fd| + 1e-8)`.
pub fn max_relative_error(ad: &[Vec<f64>], fd: &[Vec<f64>]) -> f64 {
    ad.iter()
        .flatten()
        .zip(fd.iter().flatten())
        .map(|(&a, &n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of `f` against central differences with step `h`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let ad = ad_gradient(&f, params)?;
    let fd = fd_gradient(&f, params, h)?;
    Ok(max_relative_error(&ad, &fd))
}

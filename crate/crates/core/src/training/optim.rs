use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Per-parameter Adam moments and the shared step counter. In SGD mode the
/// moments stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let (first, second) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            step: 0,
            first,
            second,
        }
    }

    /// Applies one update using each parameter's accumulated gradient.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn update(&mut self, params: &mut [&mut Tensor], lr: f32) -> Result<()> {
        if self.kind == OptimizerKind::Adam && params.len() != self.first.len() {
            return Err(Error::shape(
                "optimizer_update",
                format!("{} parameters vs {} moment slots", params.len(), self.first.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if g.len() != p.numel() {
                    return Err(Error::shape("optimizer_update", format!("param {i}: grad length")));
                }
            }
            if self.kind == OptimizerKind::Adam && self.first[i].len() != p.numel() {
                return Err(Error::shape(
                    "optimizer_update",
                    format!("param {i}: {:?} vs {} moments", p.shape(), self.first[i].len()),
                ));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let Some(g) = p.grad().map(<[f32]>::to_vec) else { continue };
                    p.data_mut().iter_mut().zip(&g).for_each(|(w, &g)| *w -= lr * g);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, p) in params.iter_mut().enumerate() {
                    let Some(g) = p.grad().map(<[f32]>::to_vec) else { continue };
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

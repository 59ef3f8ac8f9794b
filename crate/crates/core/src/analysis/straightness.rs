use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nets::VelocityModel;
use crate::sampling::integrate_endpoint;
use crate::sampling::Trajectory;
use crate::training::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StraightnessReport {
    pub nfss: f64,
    /// `(t_k, mean ||chord - v_k||^2)` for each step.
    pub per_t_residuals: Vec<(f64, f64)>,
    pub n_trajectories: usize,
}

/// Normalized straightness score: the step-averaged squared deviation of
/// recorded velocities from each path's chord `x_N - x_0`, divided by the
/// mean squared chord length. Zero for straight, uniform-speed paths.
pub fn nfss(trajectories: &[Trajectory]) -> Result<StraightnessReport> {
    let first = trajectories.first().ok_or_else(|| Error::invalid("nfss: no trajectories"))?;
    let steps = first.steps();
    if trajectories.iter().any(|t| t.steps() != steps || t.dim() != first.dim()) {
        return Err(Error::invalid("nfss: trajectories must share step count and dimension"));
    }
    let mut residual = vec![0.0f64; steps];
    let mut chord_energy = 0.0f64;
    let mut count = 0usize;
    for traj in trajectories {
        let d = traj.dim();
        for i in 0..traj.batch() {
            let chord: Vec<f64> = traj
                .endpoint()
                .row(i)
                .iter()
                .zip(traj.start().row(i))
                .map(|(&b, &a)| b as f64 - a as f64)
                .collect();
            chord_energy += chord.iter().map(|c| c * c).sum::<f64>();
            for (k, r) in residual.iter_mut().enumerate() {
                let v = traj.velocities[k].row(i);
                *r += (0..d).map(|j| (chord[j] - v[j] as f64).powi(2)).sum::<f64>();
            }
            count += 1;
        }
    }
    let chord_energy = chord_energy / count as f64;
    if !(chord_energy > 0.0) {
        return Err(Error::invalid("nfss: trajectories have zero displacement"));
    }
    let per_t_residuals: Vec<(f64, f64)> = residual
        .iter()
        .enumerate()
        .map(|(k, r)| (first.times[k] as f64, r / count as f64))
        .collect();
    let mean_residual = per_t_residuals.iter().map(|p| p.1).sum::<f64>() / steps as f64;
    Ok(StraightnessReport {
        nfss: mean_residual / chord_energy,
        per_t_residuals,
        n_trajectories: count,
    })
}

/// Mean L2 distance between `n_small`- and `n_large`-step endpoints from
/// the same initial states.
pub fn endpoint_gap(
    field: &dyn VelocityModel,
    chain_history: bool,
    x0: &Tensor,
    n_small: usize,
    n_large: usize,
) -> Result<f64> {
    if !(n_small >= 1 && n_small < n_large) {
        return Err(Error::invalid(format!(
            "endpoint_gap: need 1 <= n_small < n_large, got {n_small} and {n_large}"
        )));
    }
    let a = integrate_endpoint(field, x0, n_small, chain_history)?;
    let b = integrate_endpoint(field, x0, n_large, chain_history)?;
    Ok(mean_row_distance(&a, &b))
}

pub fn model_endpoint_gap(model: &Model, x0: &Tensor, n_small: usize, n_large: usize) -> Result<f64> {
    endpoint_gap(&model.field, model.viscous, x0, n_small, n_large)
}

pub(crate) fn mean_row_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.iter_rows()
        .zip(b.iter_rows())
        .map(|(p, q)| p.iter().zip(q).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / a.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{euler_sample, time_grid};
    use proptest::prelude::*;

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

    /// Points on the upper unit half circle from (-1, 0) to (1, 0), with each
    /// recorded velocity equal to the forward difference times `N`.
    fn half_circle(n: usize) -> Trajectory {
        let pts: Vec<[f64; 2]> = (0..=n)
            .map(|k| {
                let a = std::f64::consts::PI * (1.0 - k as f64 / n as f64);
                [a.cos(), a.sin()]
            })
            .collect();
        let vel = |k: usize| {
            let k = k.min(n - 1);
            let v = [(pts[k + 1][0] - pts[k][0]) * n as f64, (pts[k + 1][1] - pts[k][1]) * n as f64];
            Tensor::new(vec![1, 2], vec![v[0] as f32, v[1] as f32]).unwrap()
        };
        Trajectory {
            times: time_grid(n),
            states: pts
                .iter()
                .map(|p| Tensor::new(vec![1, 2], vec![p[0] as f32, p[1] as f32]).unwrap())
                .collect(),
            velocities: (0..=n).map(vel).collect(),
        }
    }

    #[test]
    fn straight_paths_score_zero() {
        let x0 = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, -1.0, 2.0, 3.0]).unwrap();
        let traj = euler_sample(&Constant(vec![2.0, -1.0]), &x0, 10).unwrap();
        let r = nfss(&[traj]).unwrap();
        assert!(r.nfss < 1e-10, "{}", r.nfss);
        assert_eq!(r.n_trajectories, 3);
        assert_eq!(r.per_t_residuals.len(), 10);
    }

    #[test]
    fn half_circle_matches_quadrature() {
        // high-precision value of the discrete score for this path at N = 100
        const EXPECTED: f64 = 1.467_198_171_342_215;
        let r = nfss(&[half_circle(100)]).unwrap();
        assert!((r.nfss - EXPECTED).abs() < 1e-5, "{}", r.nfss);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(nfss(&[]).is_err());
        let x0 = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let a = euler_sample(&Constant(vec![1.0, 0.0]), &x0, 4).unwrap();
        let b = euler_sample(&Constant(vec![1.0, 0.0]), &x0, 5).unwrap();
        assert!(nfss(&[a, b]).is_err());
        let still = euler_sample(&Constant(vec![0.0, 0.0]), &x0, 4).unwrap();
        assert!(nfss(&[still]).is_err());
    }

    #[test]
    fn endpoint_gap_closed_forms() {
        let x0 = Tensor::new(vec![2, 2], vec![3.0, 4.0, -1.0, 0.0]).unwrap();
        for (s, l) in [(1, 2), (1, 100), (5, 7)] {
            assert!(endpoint_gap(&Constant(vec![0.5, 2.0]), false, &x0, s, l).unwrap() < 1e-6);
        }
        // one step lands on 0; 100 steps on 0.99^100 * x0
        let want = 0.99f64.powi(100) * (5.0 + 1.0) / 2.0;
        let got = endpoint_gap(&Decay, false, &x0, 1, 100).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!(endpoint_gap(&Decay, false, &x0, 3, 3).is_err());
    }

    proptest! {
        #[test]
        fn translation_invariant(dx in -50.0f32..50.0, dy in -50.0f32..50.0) {
            let base = half_circle(20);
            let shift = |t: &Tensor| t.map(|v| v).zip_map(&Tensor::new(vec![1, 2], vec![dx, dy]).unwrap(), |a, b| a + b).unwrap();
            let moved = Trajectory {
                times: base.times.clone(),
                states: base.states.iter().map(shift).collect(),
                velocities: base.velocities.clone(),
            };
            let a = nfss(&[base]).unwrap().nfss;
            let b = nfss(&[moved]).unwrap().nfss;
            prop_assert!((a - b).abs() < 1e-4 * a.max(1.0));
        }
    }
}

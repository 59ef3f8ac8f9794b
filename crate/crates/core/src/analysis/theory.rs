//! Monte Carlo checks on straight-line interpolation paths between
//! independently drawn noise and data points.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{sample_target, DistributionSpec};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Threshold for calling two paths approximately crossing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum CrossingThreshold {
    Absolute(f64),
    /// Fraction of the mean distance between paired states at `t = 0.5`.
    Relative(f64),
}

impl Default for CrossingThreshold {
    fn default() -> Self {
        CrossingThreshold::Relative(0.9)
    }
}

/// A straight path `x0 -> x1`.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub x0: &'a [f32],
    pub x1: &'a [f32],
}

impl Segment<'_> {
    fn at(&self, t: f64, j: usize) -> f64 {
        t * self.x1[j] as f64 + (1.0 - t) * self.x0[j] as f64
    }
}

/// `||x_t^i - x_t^j||` at each time in `t_grid`.
pub fn pair_distances(a: Segment, b: Segment, t_grid: &[f64]) -> Vec<f64> {
    t_grid
        .iter()
        .map(|&t| {
            (0..a.x0.len())
                .map(|j| (a.at(t, j) - b.at(t, j)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Minimum distance between two straight paths over all of `[0, 1]`.
pub fn continuous_min_distance(a: Segment, b: Segment) -> f64 {
    // gap(t) = p + t q
    let p: Vec<f64> = (0..a.x0.len()).map(|j| a.x0[j] as f64 - b.x0[j] as f64).collect();
    let q: Vec<f64> = (0..a.x0.len())
        .map(|j| (a.x1[j] as f64 - b.x1[j] as f64) - p[j])
        .collect();
    let qq: f64 = q.iter().map(|v| v * v).sum();
    let t = if qq > 0.0 {
        (-p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / qq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.iter().zip(&q).map(|(a, b)| (a + t * b).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingEstimate {
    pub dim: usize,
    pub n_pairs: usize,
    pub delta: f64,
    /// Fraction of pairs whose grid-minimum distance is below `delta`.
    pub approximate: f64,
    /// Fraction of pairs whose paths meet exactly.
    pub exact: f64,
}

/// Default data law in `dim` dimensions: unit-variance Gaussian centred at 5.
pub fn shifted_gaussian(dim: usize) -> DistributionSpec {
    DistributionSpec::Gaussian {
        mean: vec![5.0; dim],
        var: vec![1.0; dim],
    }
}

fn draw_paths(spec: &DistributionSpec, n: usize, rng: &mut RngStream) -> Result<(Tensor, Tensor)> {
    let x0 = rng.normal_tensor(n, spec.dim());
    let x1 = sample_target(spec, n, rng)?;
    Ok((x0, x1))
}

/// Crossing frequency of independently paired straight paths in each
/// dimension. Paths `2k` and `2k + 1` form pair `k`.
pub fn crossing_probability_estimate(
    dims: &[usize],
    n_pairs: usize,
    t_grid: &[f64],
    threshold: CrossingThreshold,
    rng: &mut RngStream,
) -> Result<Vec<CrossingEstimate>> {
    crossing_probability_estimate_with(dims, n_pairs, t_grid, threshold, &shifted_gaussian, rng)
}

pub fn crossing_probability_estimate_with(
    dims: &[usize],
    n_pairs: usize,
    t_grid: &[f64],
    threshold: CrossingThreshold,
    target: &dyn Fn(usize) -> DistributionSpec,
    rng: &mut RngStream,
) -> Result<Vec<CrossingEstimate>> {
    let delta_ok = match threshold {
        CrossingThreshold::Absolute(d) | CrossingThreshold::Relative(d) => d >= 0.0,
    };
    if !delta_ok {
        return Err(Error::invalid("crossing threshold must be >= 0"));
    }
    if n_pairs == 0 || t_grid.is_empty() || t_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("crossing estimate needs n_pairs >= 1 and a t grid inside [0, 1]"));
    }
    let mut out = Vec::with_capacity(dims.len());
    for &dim in dims {
        let spec = target(dim);
        let (x0, x1) = draw_paths(&spec, 2 * n_pairs, rng)?;
        let seg = |i: usize| Segment {
            x0: x0.row(i),
            x1: x1.row(i),
        };
        let delta = match threshold {
            CrossingThreshold::Absolute(d) => d,
            CrossingThreshold::Relative(r) => {
                let mid: f64 = (0..n_pairs)
                    .map(|k| pair_distances(seg(2 * k), seg(2 * k + 1), &[0.5])[0])
                    .sum::<f64>()
                    / n_pairs as f64;
                r * mid
            }
        };
        let (mut approx, mut exact) = (0usize, 0usize);
        for k in 0..n_pairs {
            let (a, b) = (seg(2 * k), seg(2 * k + 1));
            let min = pair_distances(a, b, t_grid).into_iter().fold(f64::INFINITY, f64::min);
            if min < delta {
                approx += 1;
            }
            if continuous_min_distance(a, b) <= 1e-9 {
                exact += 1;
            }
        }
        out.push(CrossingEstimate {
            dim,
            n_pairs,
            delta,
            approximate: approx as f64 / n_pairs as f64,
            exact: exact as f64 / n_pairs as f64,
        });
    }
    Ok(out)
}

/// Least-squares slope of `ln(frequency)` against dimension. `None` if
/// fewer than two estimates have a positive frequency.
pub fn log_frequency_slope(estimates: &[CrossingEstimate]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = estimates
        .iter()
        .filter(|e| e.approximate > 0.0)
        .map(|e| (e.dim as f64, e.approximate.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityStateGap {
    pub t: f64,
    /// `E ||v^i - v^j||^2` with `v = x1 - x0`.
    pub delta_v: f64,
    /// `E ||x_t^i - x_t^j||^2`.
    pub delta_x: f64,
    pub ratio: f64,
}

/// Mean squared pair differences of reference velocities and of
/// interpolated states, over `n_pairs` independent path pairs shared by
/// every `t` in the grid.
pub fn velocity_state_gap_check(
    target: &DistributionSpec,
    n_pairs: usize,
    t_grid: &[f64],
    rng: &mut RngStream,
) -> Result<Vec<VelocityStateGap>> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be >= 1"));
    }
    if let Some(t) = t_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Domain {
            op: "velocity_state_gap_check",
            detail: format!("t = {t} outside [0, 1]"),
        });
    }
    let (x0, x1) = draw_paths(target, 2 * n_pairs, rng)?;
    let d = target.dim();
    // per pair: dx0 = x0^i - x0^j, dx1 = x1^i - x1^j
    let mut s00 = 0.0;
    let mut s11 = 0.0;
    let mut s01 = 0.0;
    for k in 0..n_pairs {
        let (a0, b0) = (x0.row(2 * k), x0.row(2 * k + 1));
        let (a1, b1) = (x1.row(2 * k), x1.row(2 * k + 1));
        for j in 0..d {
            let p = a0[j] as f64 - b0[j] as f64;
            let q = a1[j] as f64 - b1[j] as f64;
            s00 += p * p;
            s11 += q * q;
            s01 += p * q;
        }
    }
    let n = n_pairs as f64;
    let (s00, s11, s01) = (s00 / n, s11 / n, s01 / n);
    let delta_v = s11 + s00 - 2.0 * s01;
    Ok(t_grid
        .iter()
        .map(|&t| {
            let delta_x = t * t * s11 + (1.0 - t) * (1.0 - t) * s00 + 2.0 * t * (1.0 - t) * s01;
            VelocityStateGap {
                t,
                delta_v,
                delta_x,
                ratio: delta_x / delta_v,
            }
        })
        .collect())
}

/// Limit of `delta_x / delta_v` for independent endpoints with isotropic
/// variances `var0` (noise) and `var1` (data).
pub fn independent_gap_ratio(t: f64, var0: f64, var1: f64) -> f64 {
    (t * t * var1 + (1.0 - t) * (1.0 - t) * var0) / (var0 + var1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<f64> {
        (0..=n).map(|k| k as f64 / n as f64).collect()
    }

    #[test]
    fn self_pair_crosses_everywhere() {
        let (x0, x1) = ([0.3f32, -1.0], [4.0f32, 2.0]);
        let s = Segment { x0: &x0, x1: &x1 };
        assert!(pair_distances(s, s, &grid(10)).iter().all(|&d| d == 0.0));
        assert_eq!(continuous_min_distance(s, s), 0.0);
    }

    #[test]
    fn opposite_one_dimensional_paths_meet_at_half() {
        let a = Segment { x0: &[-1.0], x1: &[1.0] };
        let b = Segment { x0: &[1.0], x1: &[-1.0] };
        let d = pair_distances(a, b, &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(d, vec![2.0, 1.0, 0.0, 1.0, 2.0]);
        assert_eq!(continuous_min_distance(a, b), 0.0);
        let c = Segment { x0: &[-1.0], x1: &[1.0] };
        let e = Segment { x0: &[0.0], x1: &[2.0] };
        assert_eq!(continuous_min_distance(c, e), 1.0);
    }

    #[test]
    fn threshold_limits() {
        let mut rng = RngStream::new(0);
        let g = grid(20);
        let huge = crossing_probability_estimate(&[2, 8], 200, &g, CrossingThreshold::Absolute(1e9), &mut rng).unwrap();
        assert!(huge.iter().all(|e| e.approximate == 1.0));
        let zero = crossing_probability_estimate(&[2, 8], 200, &g, CrossingThreshold::Absolute(0.0), &mut rng).unwrap();
        assert!(zero.iter().all(|e| e.approximate == 0.0 && e.exact == 0.0));
        assert!(crossing_probability_estimate(&[2], 10, &g, CrossingThreshold::Absolute(-1.0), &mut rng).is_err());
    }

    #[test]
    fn slope_fit() {
        let est = |dim, p| CrossingEstimate {
            dim,
            n_pairs: 1,
            delta: 1.0,
            approximate: p,
            exact: 0.0,
        };
        let s = log_frequency_slope(&[est(1, 1.0), est(2, (-0.5f64).exp()), est(3, (-1.0f64).exp())]).unwrap();
        assert!((s + 0.5).abs() < 1e-12);
        assert!(log_frequency_slope(&[est(1, 0.5), est(2, 0.0)]).is_none());
    }

    #[test]
    fn gap_ratio_endpoints() {
        assert_eq!(independent_gap_ratio(0.0, 1.0, 1.0), 0.5);
        assert_eq!(independent_gap_ratio(1.0, 1.0, 1.0), 0.5);
        assert_eq!(independent_gap_ratio(0.5, 1.0, 1.0), 0.25);
    }

    #[test]
    fn gap_check_tracks_closed_form() {
        let mut rng = RngStream::new(7);
        let ts = [0.0, 0.25, 0.5, 0.75, 1.0];
        let r = velocity_state_gap_check(&shifted_gaussian(2), 20_000, &ts, &mut rng).unwrap();
        for g in &r {
            let want = independent_gap_ratio(g.t, 1.0, 1.0);
            assert!((g.ratio - want).abs() < 0.02 * want, "t={} {} vs {}", g.t, g.ratio, want);
            assert!(g.delta_v >= g.delta_x);
        }
        assert!(velocity_state_gap_check(&shifted_gaussian(2), 10, &[1.5], &mut rng).is_err());
    }

    #[test]
    fn gap_inequality_on_mixture() {
        let mix = DistributionSpec::GaussianMixture {
            means: vec![vec![-4.0, 0.0], vec![4.0, 3.0]],
            vars: vec![vec![0.3, 0.3], vec![0.5, 0.2]],
            weights: vec![0.4, 0.6],
        };
        let mut rng = RngStream::new(8);
        for g in velocity_state_gap_check(&mix, 5000, &grid(10), &mut rng).unwrap() {
            assert!(g.delta_v >= g.delta_x, "t={}", g.t);
        }
    }
}

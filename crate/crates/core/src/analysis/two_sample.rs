use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleReport {
    pub energy_distance: f64,
    pub permutation_p_value: f64,
    pub n_per_side: usize,
    pub n_other: usize,
    pub permutations: usize,
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

fn mean_cross(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for p in a.iter_rows() {
        for q in b.iter_rows() {
            s += dist(p, q);
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` with all pairs averaged, including
/// each point with itself, so the statistic is exactly zero for identical
/// samples and never negative.
pub fn energy_distance_statistic(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let v = 2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b);
    Ok(v.max(0.0))
}

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::invalid("energy distance needs at least two points per side"));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("energy_distance", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Pooled pairwise distances, kept in single precision to bound memory.
struct Pooled {
    n: usize,
    d: Vec<f32>,
    row_sums: Vec<f64>,
}

impl Pooled {
    fn new(a: &Tensor, b: &Tensor) -> Self {
        let rows: Vec<&[f32]> = a.iter_rows().chain(b.iter_rows()).collect();
        let n = rows.len();
        let mut d = vec![0.0f32; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = dist(rows[i], rows[j]) as f32;
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        let row_sums = d.chunks(n).map(|r| r.iter().map(|&v| v as f64).sum()).collect();
        Self { n, d, row_sums }
    }

    fn masked_row_sum(&self, i: usize, mask: &[f32]) -> f64 {
        let row = &self.d[i * self.n..(i + 1) * self.n];
        let mut acc = [0.0f32; 8];
        let rc = row.chunks_exact(8);
        let mc = mask.chunks_exact(8);
        let (rr, mr) = (rc.remainder(), mc.remainder());
        for (r, m) in rc.zip(mc) {
            for l in 0..8 {
                acc[l] += r[l] * m[l];
            }
        }
        let tail: f32 = rr.iter().zip(mr).map(|(&r, &m)| r * m).sum();
        acc.iter().map(|&v| v as f64).sum::<f64>() + tail as f64
    }

    /// Statistic for the split where `members` (size `na`) form the first side.
    fn statistic(&self, members: &[usize], mask: &[f32]) -> f64 {
        let na = members.len();
        let nb = self.n - na;
        let (mut s_aa, mut r_a) = (0.0, 0.0);
        for &i in members {
            s_aa += self.masked_row_sum(i, mask);
            r_a += self.row_sums[i];
        }
        let s_ab = r_a - s_aa;
        let total: f64 = self.row_sums.iter().sum();
        let s_bb = total - r_a - s_ab;
        2.0 * s_ab / (na * nb) as f64 - s_aa / (na * na) as f64 - s_bb / (nb * nb) as f64
    }
}

/// Energy distance with a label-permutation p-value
/// `(1 + #{permuted >= observed}) / (1 + permutations)`.
pub fn energy_distance(a: &Tensor, b: &Tensor, permutations: usize, rng: &mut RngStream) -> Result<TwoSampleReport> {
    check(a, b)?;
    let energy_distance = energy_distance_statistic(a, b)?;
    let pooled = Pooled::new(a, b);
    let (na, n) = (a.rows(), pooled.n);
    let mut mask = vec![0.0f32; n];
    let observed_members: Vec<usize> = (0..na).collect();
    mask[..na].iter_mut().for_each(|m| *m = 1.0);
    let observed = pooled.statistic(&observed_members, &mask);
    let scale = pooled.row_sums.iter().sum::<f64>() / (n * n) as f64;
    let tol = 1e-6 * scale.max(f64::MIN_POSITIVE);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut hits = 0usize;
    for _ in 0..permutations {
        rng.shuffle(&mut idx);
        mask.iter_mut().for_each(|m| *m = 0.0);
        for &i in &idx[..na] {
            mask[i] = 1.0;
        }
        if pooled.statistic(&idx[..na], &mask) >= observed - tol {
            hits += 1;
        }
    }
    Ok(TwoSampleReport {
        energy_distance,
        permutation_p_value: (1 + hits) as f64 / (1 + permutations) as f64,
        n_per_side: na,
        n_other: b.rows(),
        permutations,
    })
}

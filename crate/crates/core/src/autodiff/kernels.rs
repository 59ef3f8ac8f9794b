//! Dense matmul kernels. Loops are ordered so the innermost loop walks
//! contiguous memory of both operands, which the compiler vectorizes.

use super::tensor::Real;

/// `c[m,n] = a[m,k] @ b[k,n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

/// `out[k,n] += a[m,k]^T @ g[m,n]`
pub fn matmul_tn_acc<T: Real>(out: &mut [T], a: &[T], g: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gj) in orow.iter_mut().zip(grow) {
                *o = *o + aip * gj;
            }
        }
    }
}

/// `out[m,k] += g[m,n] @ b[k,n]^T`
pub fn matmul_nt_acc<T: Real>(out: &mut [T], g: &[T], b: &[T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, &gij) in grow.iter().enumerate() {
            if gij == T::zero() {
                continue;
            }
            let btrow = &bt[j * k..(j + 1) * k];
            for (o, &bv) in orow.iter_mut().zip(btrow) {
                *o = *o + gij * bv;
            }
        }
    }
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let g: Vec<f64> = (0..m * n).map(|i| (i as f64 * 1.3).sin()).collect();

        let c = matmul(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut db = vec![0.0; k * n];
        matmul_tn_acc(&mut db, &a, &g, m, k, n);
        let at = transpose(&a, m, k);
        for (x, y) in db.iter().zip(naive(&at, &g, k, m, n)) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut da = vec![0.0; m * k];
        matmul_nt_acc(&mut da, &g, &b, m, k, n);
        let bt = transpose(&b, k, n);
        for (x, y) in da.iter().zip(naive(&g, &bt, m, n, k)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

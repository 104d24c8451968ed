//! Row-major dense kernels over `f64` slices, backed by `matrixmultiply`.

use matrixmultiply::dgemm;

/// `a` is `m×k`, `b` is `k×n`; returns `m×n`.
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(a, (k, 1), b, (n, 1), &mut c, m, k, n, 0.0);
    c
}

/// `c += aᵀ·b` with `a` `m×k`, `b` `m×n`, `c` `k×n`.
pub fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(a, (1, k), b, (n, 1), c, k, m, n, 1.0);
}

/// `a·bᵀ` with `a` `m×n`, `b` `k×n`; returns `m×k`.
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    gemm(a, (n, 1), b, (1, n), &mut c, m, n, k, 0.0);
    c
}

/// `c = A·B + beta·c` where `A` is `m×k` and `B` is `k×n`, both given as
/// slices with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], m: usize, k: usize, n: usize, beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assert above bounds every index dgemm touches given the
    // strides, which describe dense m×k, k×n and m×n layouts.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adds `bias` to every row of the `rows × bias.len()` matrix `x`.
pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

/// `acc += Σ_rows x`.
pub fn col_sum_acc(x: &[f64], acc: &mut [f64]) {
    for row in x.chunks_exact(acc.len()) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
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
    fn kernels_match_naive_loops() {
        let (m, k, n) = (5, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 1.3).cos()).collect();
        let c = mm(&a, &b, m, k, n);
        let r = naive(&a, &b, m, k, n);
        assert!(c.iter().zip(&r).all(|(x, y)| (x - y).abs() < 1e-14));

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let d: Vec<f64> = (0..m * n).map(|i| i as f64 - 3.0).collect();
        let mut acc = vec![1.0; k * n];
        mm_tn_acc(&a, &d, m, k, n, &mut acc);
        let r = naive(&at, &d, k, m, n);
        assert!(acc.iter().zip(&r).all(|(x, y)| (x - 1.0 - y).abs() < 1e-12));

        let e = mm_nt(&c, &b, m, n, k);
        let r = naive(&c, &transpose(&b, k, n), m, n, k);
        assert!(e.iter().zip(&r).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }
}

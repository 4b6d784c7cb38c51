//! Dense kernels shared by the forward and backward passes.

/// `c ← beta·c + op(a)·op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored row-major as `m×k` (or `k×m` when `ta`), `b` as `k×n` (or
/// `n×k` when `tb`). Transposition is expressed through strides, so no copy
/// is made.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain `m×k · k×n` product into a fresh buffer.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, 0.0, &mut out);
    out
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-density of `z` under a diagonal Gaussian mixture.
///
/// `means` and `logvars` are row-major `n_c×C`. On return `terms[m]` holds
/// `log w_m + log N(z | μ_m, diag exp(logvar_m))`; the result is their
/// log-sum-exp.
pub fn diag_gmm_log_density(
    z: &[f64],
    means: &[f64],
    logvars: &[f64],
    log_weights: &[f64],
    terms: &mut [f64],
) -> f64 {
    let c = z.len();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    for (m, term) in terms.iter_mut().enumerate().take(log_weights.len()) {
        let mu = &means[m * c..(m + 1) * c];
        let lv = &logvars[m * c..(m + 1) * c];
        let mut quad = 0.0;
        for j in 0..c {
            let d = z[j] - mu[j];
            quad += d * d * (-lv[j]).exp() + lv[j] + ln_2pi;
        }
        *term = log_weights[m] - 0.5 * quad;
    }
    log_sum_exp(&terms[..log_weights.len()])
}

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Determinant of a small dense square matrix by partial-pivot LU.
pub fn determinant(n: usize, a: &[f64]) -> f64 {
    let mut lu = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
            .unwrap();
        if lu[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                lu.swap(pivot * n + j, col * n + j);
            }
            det = -det;
        }
        let p = lu[col * n + col];
        det *= p;
        for i in col + 1..n {
            let f = lu[i * n + col] / p;
            for j in col..n {
                lu[i * n + j] -= f * lu[col * n + j];
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_operands_match_explicit_transpose() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut got = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, 0.0, &mut got);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn determinant_of_known_matrices() {
        assert!((determinant(2, &[1.0, 2.0, 3.0, 4.0]) + 2.0).abs() < 1e-12);
        assert!((determinant(3, &[2.0, 0.0, 0.0, 1.0, 3.0, 0.0, 5.0, 7.0, 4.0]) - 24.0).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_large_values() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}

//! Small dense matmul kernels behind the convolution paths.
//!
//! `gemm_acc` accumulates each output element strictly in ascending-k
//! order with a single accumulator, so the im2col convolution reproduces
//! the naive sliding-window sum bit for bit.

/// C += A * B with row-major C: (m x n), A: (m x k), B: (k x n).
pub fn gemm_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    // Four A-rows share each streamed B-row.
    while i + 4 <= m {
        let (c0, rest) = c[i * n..].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, rest) = rest.split_at_mut(n);
        let c3 = &mut rest[..n];
        for kk in 0..k {
            let a0 = a[i * k + kk];
            let a1 = a[(i + 1) * k + kk];
            let a2 = a[(i + 2) * k + kk];
            let a3 = a[(i + 3) * k + kk];
            let br = &b[kk * n..kk * n + n];
            for j in 0..n {
                let bj = br[j];
                c0[j] += a0 * bj;
                c1[j] += a1 * bj;
                c2[j] += a2 * bj;
                c3[j] += a3 * bj;
            }
        }
        i += 4;
    }
    while i < m {
        let ci = &mut c[i * n..i * n + n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let br = &b[kk * n..kk * n + n];
            for j in 0..n {
                ci[j] += av * br[j];
            }
        }
        i += 1;
    }
}

/// C += A * B^T with row-major C: (m x n), A: (m x k), B: (n x k).
///
/// Dot-product form used for weight gradients; summation order here is
/// not part of any bitwise contract.
pub fn gemm_abt_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..i * k + k];
        let ci = &mut c[i * n..i * n + n];
        for j in 0..n {
            let br = &b[j * k..j * k + k];
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            let mut s3 = 0.0;
            let chunks = k / 4 * 4;
            let mut kk = 0;
            while kk < chunks {
                s0 += ar[kk] * br[kk];
                s1 += ar[kk + 1] * br[kk + 1];
                s2 += ar[kk + 2] * br[kk + 2];
                s3 += ar[kk + 3] * br[kk + 3];
                kk += 4;
            }
            let mut s = (s0 + s1) + (s2 + s3);
            while kk < k {
                s += ar[kk] * br[kk];
                kk += 1;
            }
            ci[j] += s;
        }
    }
}

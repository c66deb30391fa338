//! Raw numeric kernels shared by the graph ops.
//!
//! All matrices are row-major slices. The matmul variants avoid
//! materializing transposes in the backward pass. Loop order is chosen so
//! the inner loop runs over contiguous memory and auto-vectorizes.

/// out = a @ b, a: [m,k], b: [k,n], out: [m,n] (overwritten).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out += a^T @ b, a: [m,k], b: [m,n], out: [k,n] (accumulated).
/// The transpose is expressed through strides; nothing is copied.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out += a @ b^T, a: [m,k], b: [n,k], out: [m,n] (accumulated).
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn transpose(a: &[f64], m: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Row-wise softmax with max subtraction. `x` and `out` are [rows, cols].
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let xin = &x[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let max = xin.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(xin) {
            let e = (xi - max).exp();
            *oi = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for oi in o.iter_mut() {
            *oi *= inv;
        }
    }
}

/// Row-wise log-softmax: x - max - ln(sum exp(x - max)).
pub fn log_softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let xin = &x[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let max = xin.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &xi in xin {
            sum += (xi - max).exp();
        }
        let lse = max + sum.ln();
        for (oi, &xi) in o.iter_mut().zip(xin) {
            *oi = xi - lse;
        }
    }
}

pub const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044715;

/// tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// log(exp(a) + exp(b)) with -inf handling.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [2,3] @ [3,2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_acc_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // [2,3] -> b^T [3,2]
        let mut bt = [0.0; 6];
        transpose(&b, 2, 3, &mut bt);
        let mut want = [0.0; 4];
        matmul(&a, &bt, 2, 3, 2, &mut want);
        let mut got = [0.0; 4];
        matmul_nt_acc(&a, &b, 2, 3, 2, &mut got);
        assert_eq!(got, want);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [3,2] -> a^T [2,3]
        let b = [1.0, -1.0, 2.0, 0.5, 0.0, 1.0]; // [3,2]
        let mut at = [0.0; 6];
        transpose(&a, 3, 2, &mut at);
        let mut want = [0.0; 4];
        matmul(&at, &b, 2, 3, 2, &mut want);
        let mut got = [0.0; 4];
        matmul_tn_acc(&a, &b, 3, 2, 2, &mut got);
        assert_eq!(got, want);
    }

    #[test]
    fn log_add_handles_neg_inf() {
        assert_eq!(log_add(f64::NEG_INFINITY, -1.0), -1.0);
        assert_eq!(log_add(-1.0, f64::NEG_INFINITY), -1.0);
        let v = log_add((0.5f64).ln(), (0.25f64).ln());
        assert!((v - (0.75f64).ln()).abs() < 1e-14);
    }
}

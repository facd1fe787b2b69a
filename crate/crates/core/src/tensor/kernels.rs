use super::LAYERNORM_EPS;

/// `C (+)= A · B` for row-major `C` (m×n). `A` and `B` are addressed through
/// (row stride, column stride) pairs so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let last_a = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let last_b = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(last_a < a.len() && last_b < b.len(), "gemm operand out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the bounds of every operand were checked above and the output
    // slice does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of `x` into `out`; returns log-sum-exp.
pub fn log_softmax(x: &[f64], out: &mut [f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
    lse
}

/// Normalize a row in place to zero mean and unit variance; returns
/// `1/sqrt(var + eps)`.
pub(crate) fn layernorm_row(row: &mut [f64]) -> f64 {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
    for x in row.iter_mut() {
        *x = (*x - mean) * inv;
    }
    inv
}

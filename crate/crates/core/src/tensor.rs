//! Dense row-major f32 kernels shared by inference and training.

/// Layer-norm epsilon.
pub const LN_EPS: f32 = 1e-5;

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` logically `m×k`
/// and `b` logically `k×n`. A transposed operand is stored in the transposed
/// shape (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too small");
    assert!(b.len() >= k * n, "gemm: rhs too small");
    assert!(c.len() >= m * n, "gemm: output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
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

/// `out[r] = x[r] · w + bias` for every row of `x` (`rows×in` → `rows×out`).
pub fn linear(x: &[f32], rows: usize, w: &[f32], bias: &[f32], d_in: usize, d_out: usize, out: &mut [f32]) {
    for row in out[..rows * d_out].chunks_exact_mut(d_out) {
        row.copy_from_slice(bias);
    }
    gemm(rows, d_in, d_out, x, false, w, false, out, true);
}

/// Row-wise layer norm. Returns nothing; `out` receives `gain * xhat + bias`.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) {
    let d = gain.len();
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let (mean, rstd) = moments(xr);
        for c in 0..d {
            or[c] = (xr[c] - mean) * rstd * gain[c] + bias[c];
        }
    }
}

/// Mean and reciprocal standard deviation of one row.
#[inline]
pub fn moments(x: &[f32]) -> (f32, f32) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Tanh-approximation GELU, written as `x · σ(2z)` (`0.5(1 + tanh z) = σ(2z)`),
/// which avoids the much slower `tanh`.
#[inline]
pub fn gelu(x: f32) -> f32 {
    x * half_one_plus_tanh(x)
}

#[inline]
fn half_one_plus_tanh(x: f32) -> f32 {
    let z = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + (-2.0 * z).exp())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let s = half_one_plus_tanh(x);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    // d/dz σ(2z) = 2σ(1 − σ)
    s + x * 2.0 * s * (1.0 - s) * dinner
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// Read-out softmax: exponentials and their sum in f64, so probabilities over
/// a full vocabulary stay accurate to well below 1e-6 (a sequential f32 sum
/// over thousands of terms does not).
pub fn softmax(v: &[f32]) -> Vec<f32> {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = v.iter().map(|&x| (x as f64 - max).exp()).collect();
    let inv = 1.0 / e.iter().sum::<f64>();
    e.iter().map(|x| (x * inv) as f32).collect()
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

//! Dense numeric kernels shared by the differentiable tape and the
//! tape-free inference path. Both routes must produce identical values.

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = a·b + beta·c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().take(m * n).for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the slices cover every element addressed by the given shapes
    // and strides; `c` does not alias `a` or `b`.
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

/// `x[m×k] · w[k×n] (+ bias[n])`, where `w` may be a column prefix of a wider
/// `[k×ld]` matrix.
pub fn linear(x: &[f64], m: usize, k: usize, w: &[f64], ld: usize, n: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(&b[..n]);
        }
        gemm(m, k, n, x, (k, 1), w, (ld, 1), 1.0, &mut out);
    } else {
        gemm(m, k, n, x, (k, 1), w, (ld, 1), 0.0, &mut out);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(exp(a) + exp(b))` with max-shift; handles `-inf` operands.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Row-wise log-softmax, in place.
pub fn log_softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|x| *x -= lse);
    }
}

/// Layer normalization over the last axis.
pub fn layer_norm_rows(x: &[f64], cols: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let (mean, inv) = row_stats(row);
        out.extend(
            row.iter()
                .zip(gain)
                .zip(bias)
                .map(|((v, g), b)| (v - mean) * inv * g + b),
        );
    }
    out
}

pub(crate) fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Single-gate linear recurrence over time.
///
/// `x` is `[T × 2d]`: the first `d` columns are gate pre-activations, the last
/// `d` candidate pre-activations. `h_t = σ(g_t)·h_{t-1} + (1-σ(g_t))·tanh(c_t)`
/// starting from `state` (zeros for a fresh sequence). Returns `[T × d]`.
pub fn gated_scan(x: &[f64], d: usize, state: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / 2);
    let mut h = state.to_vec();
    for row in x.chunks_exact(2 * d) {
        for i in 0..d {
            let g = sigmoid(row[i]);
            let c = row[d + i].tanh();
            h[i] = g * h[i] + (1.0 - g) * c;
        }
        out.extend_from_slice(&h);
    }
    out
}

/// [`gated_scan`] restarted from zeros at the start of each row segment.
pub fn gated_scan_segments(x: &[f64], d: usize, segments: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / 2);
    let zero = vec![0.0; d];
    let mut start = 0;
    for &len in segments {
        out.extend(gated_scan(&x[start * 2 * d..(start + len) * 2 * d], d, &zero));
        start += len;
    }
    out
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

//! Plain slice kernels shared by the tape and the incremental decoder.
//!
//! Every output element is accumulated in a fixed order that does not depend
//! on how many rows are processed at once, so a row computed alone is
//! bit-identical to the same row computed inside a batch.

/// out[m×p] += a[m×n] · b[n×p]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        let a_row = &a[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * p..(k + 1) * p];
            for (o, &bkj) in row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    matmul_acc(a, b, &mut out, m, n, p);
    out
}

/// out[m×n] += g[m×p] · b[n×p]ᵀ
pub fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for k in 0..n {
            let b_row = &b[k * p..(k + 1) * p];
            let mut s = 0.0;
            for (x, y) in g_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + k] += s;
        }
    }
}

/// out[n×p] += a[m×n]ᵀ · g[m×p]
pub fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let o_row = &mut out[k * p..(k + 1) * p];
            for (o, &gij) in o_row.iter_mut().zip(g_row) {
                *o += aik * gij;
            }
        }
    }
}

/// Normalizes one row; returns the reciprocal standard deviation.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    for (((o, &xi), &g), &b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = (xi - mean) * rstd * g + b;
    }
    rstd
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Causal attention for query row `i` of one head.
///
/// `keys`/`values` are row-major with row stride `d`; the head occupies
/// columns `[off, off+dh)`. Writes the attention weights over positions
/// `0..=i` into `probs` and accumulates the mixed values into `out` (length dh).
#[allow(clippy::too_many_arguments)]
pub fn attend_row(
    q_row: &[f64],
    keys: &[f64],
    values: &[f64],
    i: usize,
    d: usize,
    off: usize,
    dh: usize,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let scale = 1.0 / (dh as f64).sqrt();
    let q = &q_row[off..off + dh];
    for j in 0..=i {
        let k = &keys[j * d + off..j * d + off + dh];
        let mut s = 0.0;
        for (a, b) in q.iter().zip(k) {
            s += a * b;
        }
        probs[j] = s * scale;
    }
    softmax_in_place(&mut probs[..=i]);
    for j in 0..=i {
        let p = probs[j];
        let v = &values[j * d + off..j * d + off + dh];
        for (o, &vj) in out.iter_mut().zip(v) {
            *o += p * vj;
        }
    }
}

pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

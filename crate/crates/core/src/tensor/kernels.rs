//! Shared numeric kernels.
//!
//! The tape forward ops and the streaming inference path both call these
//! routines, with identical loop order, so a value computed during training
//! and the same value computed step-by-step at decode time are bit-equal.

/// C[m,n] = sum_k A[m,k] * B[k,n], accumulated in ascending k.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        orow.fill(0.0);
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// In-place softmax over one row: subtract max, exponentiate, normalize.
pub fn softmax_row(row: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In-place log-softmax over one row.
pub fn log_softmax_row(row: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0;
    for &v in row.iter() {
        sum += (v - mx).exp();
    }
    let lse = mx + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Layer norm over one row with learned gain/bias and epsilon under the
/// square root.
pub fn layer_norm_row(row: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) {
    let n = row.len() as f64;
    let mut mean = 0.0;
    for &v in row {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let denom = (var + eps).sqrt();
    for i in 0..row.len() {
        out[i] = (row[i] - mean) / denom * gain[i] + bias[i];
    }
}

/// log(exp(a) + exp(b)) without overflow; handles -inf identities exactly.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

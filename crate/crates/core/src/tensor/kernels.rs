//! Slice-level numeric kernels shared by the tape and the eager paths.

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_COEF: f32 = 0.044_715;

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    matmul_acc(a, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // four partial sums keep the reduction vectorizable
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// In-place softmax over a contiguous row.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// In-place softmax along the middle extent of an (outer, len, inner) layout.
pub fn softmax_strided(data: &mut [f32], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        for row in data.chunks_exact_mut(len) {
            softmax_row(row);
        }
        return;
    }
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for l in 0..len {
                buf[l] = data[(o * len + l) * inner + i];
            }
            softmax_row(&mut buf);
            for l in 0..len {
                data[(o * len + l) * inner + i] = buf[l];
            }
        }
    }
}

/// In-place log-softmax over a contiguous row.
pub fn log_softmax_row(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f32>().ln() + max;
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Softmax of `scores` with column weights `mask`:
/// `p_j = m_j·exp(s_j) / Σ_k m_k·exp(s_k)`, i.e. `softmax(s + ln m)`.
/// A zero weight removes the column exactly.
pub fn masked_softmax_row(scores: &[f32], mask: &[f32], out: &mut [f32]) {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m > 0.0)
        .fold(f32::NEG_INFINITY, |acc, (&s, _)| acc.max(s));
    let mut sum = 0.0;
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m > 0.0 { m * (s - max).exp() } else { 0.0 };
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Row-wise layer norm. When `stats` is given it receives `(mean, rstd)`
/// per row for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    rows: usize,
    cols: usize,
    out: &mut [f32],
    mut stats: Option<&mut Vec<(f32, f32)>>,
) {
    let inv_n = 1.0 / cols as f32;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f32>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() * inv_n;
        let rstd = 1.0 / (var + eps).sqrt();
        let orow = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            orow[c] = (row[c] - mean) * rstd * gamma[c] + beta[c];
        }
        if let Some(s) = stats.as_deref_mut() {
            s.push((mean, rstd));
        }
    }
}

/// Tanh-approximation GELU.
pub fn gelu(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

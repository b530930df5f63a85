//! Slice-level numeric kernels shared by the tape and the inference path.

use super::{AttnShape, Scalar};

/// `out = a[m×k] · b[k×n]` (overwrites `out`).
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out[..m * n].fill(T::ZERO);
    matmul_acc(a, b, m, k, n, out);
}

const MR: usize = 4;
const NR: usize = 16;

/// `out += a[m×k] · b[k×n]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let full_cols = n - n % NR;
    let mut i = 0;
    // register-blocked MR×NR tiles
    while i + MR <= m {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[T::ZERO; NR]; MR];
            for p in 0..k {
                let bv: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for (o, &bc) in row.iter_mut().zip(bv) {
                        *o += av * bc;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for (x, &v) in o.iter_mut().zip(row) {
                    *x += v;
                }
            }
            j += NR;
        }
        if full_cols < n {
            matmul_rows(&a[i * k..(i + MR) * k], b, MR, k, n, full_cols, &mut out[i * n..(i + MR) * n]);
        }
        i += MR;
    }
    if i < m {
        matmul_rows(&a[i * k..m * k], b, m - i, k, n, 0, &mut out[i * n..m * n]);
    }
}

// Row-streaming product restricted to output columns `from..n`. Sums start
// from zero like the tiles do, so a row rounds the same whichever path it takes.
fn matmul_rows<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, from: usize, out: &mut [T]) {
    let mut acc = vec![T::ZERO; n - from];
    for i in 0..m {
        acc.fill(T::ZERO);
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            axpy(av, &b[p * n + from..(p + 1) * n], &mut acc);
        }
        for (o, &v) in out[i * n + from..(i + 1) * n].iter_mut().zip(&acc) {
            *o += v;
        }
    }
}

/// `out += aᵀ · c` where `a` is `[m×k]` and `c` is `[m×n]`; `out` is `[k×n]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], c: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let at = transpose(&a[..m * k], m, k);
    matmul_acc(&at, c, k, m, n, out);
}

/// `out += c · bᵀ` where `c` is `[m×n]` and `b` is `[k×n]`; `out` is `[m×k]`.
pub fn matmul_nt_acc<T: Scalar>(c: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    // the row-streaming kernel vectorizes far better than per-element dots
    let bt = transpose(&b[..k * n], k, n);
    matmul_acc(c, &bt, m, n, k, out);
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent accumulators (fixed order, so results
/// are reproducible bit for bit).
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Max-subtracted softmax over one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax of one row into `out`.
pub fn log_softmax<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut mx = row[0];
    for &v in row {
        mx = mx.max(v);
    }
    let mut sum = T::ZERO;
    for &v in row {
        sum += (v - mx).exp();
    }
    let lse = mx + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Scaled dot-product multi-head attention forward pass.
///
/// `q` is `[batch*q_len, d]`, `k`/`v` are `[batch*k_len, d]`. `key_mask` marks
/// attendable keys; with `causal`, query `i` sees keys `j <= i + k_len - q_len`.
/// Disallowed keys receive probability exactly zero. When `probs` is given it
/// receives the `[batch, heads, q_len, k_len]` attention weights.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    shape: AttnShape,
    key_mask: &[bool],
    causal: bool,
    mut probs: Option<&mut [T]>,
) -> Vec<T> {
    let AttnShape {
        batch,
        q_len,
        k_len,
        heads,
    } = shape;
    let dh = d / heads;
    let scale = T::ONE / T::from_f64(dh as f64).sqrt();
    let offset = k_len - q_len.min(k_len);
    let mut out = vec![T::ZERO; batch * q_len * d];
    let mut p = vec![T::ZERO; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..q_len {
                let qrow = &q[(b * q_len + i) * d + col..][..dh];
                let limit = if causal { (i + offset + 1).min(k_len) } else { k_len };
                p.fill(T::ZERO);
                let mut mx: Option<T> = None;
                for j in 0..limit {
                    if !key_mask[b * k_len + j] {
                        continue;
                    }
                    let s = dot(qrow, &k[(b * k_len + j) * d + col..][..dh]) * scale;
                    p[j] = s;
                    mx = Some(match mx {
                        Some(m) => m.max(s),
                        None => s,
                    });
                }
                if let Some(mx) = mx {
                    let mut sum = T::ZERO;
                    for j in 0..limit {
                        if key_mask[b * k_len + j] {
                            p[j] = (p[j] - mx).exp();
                            sum += p[j];
                        }
                    }
                    let inv = T::ONE / sum;
                    let orow = &mut out[(b * q_len + i) * d + col..][..dh];
                    for j in 0..limit {
                        if key_mask[b * k_len + j] {
                            p[j] *= inv;
                            axpy(p[j], &v[(b * k_len + j) * d + col..][..dh], orow);
                        }
                    }
                }
                if let Some(pr) = probs.as_deref_mut() {
                    pr[((b * heads + h) * q_len + i) * k_len..][..k_len].copy_from_slice(&p);
                }
            }
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalize each row of `x` (width `d`) and apply gain/bias. Returns the
/// per-row inverse standard deviations; `xhat` receives the normalized values.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    mut xhat: Option<&mut [T]>,
) -> Vec<T> {
    let rows = x.len() / d;
    let eps = T::from_f64(LAYER_NORM_EPS);
    let inv_d = T::ONE / T::from_f64(d as f64);
    let mut inv_stds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut mean = T::ZERO;
        for &v in xr {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let inv_std = T::ONE / (var + eps).sqrt();
        inv_stds.push(inv_std);
        let or = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let h = (xr[j] - mean) * inv_std;
            or[j] = h * gain[j] + bias[j];
            if let Some(xh) = xhat.as_deref_mut() {
                xh[r * d + j] = h;
            }
        }
    }
    inv_stds
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::ONE + three * a * x * x);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * du
}

/// Sinusoidal position encoding for position `pos` into a row of width `d`.
pub fn sinusoid_row<T: Scalar>(pos: usize, row: &mut [T]) {
    let d = row.len();
    for i in 0..d / 2 {
        let freq = (-(2.0 * i as f64) / d as f64 * 10000f64.ln()).exp();
        let angle = pos as f64 * freq;
        row[2 * i] = T::from_f64(angle.sin());
        row[2 * i + 1] = T::from_f64(angle.cos());
    }
    if d % 2 == 1 {
        row[d - 1] = T::from_f64((pos as f64).sin());
    }
}

//! Row-level kernels shared by the training forward pass and incremental
//! decoding. Both paths call exactly these functions, so a row's values do
//! not depend on how many other rows are processed with it.

use crate::real::{axpy, dot, Real};

/// `y[o] = w[o] . x` for a row-major `out x in` weight.
#[inline]
pub fn linear<T: Real>(w: &[T], x: &[T], y: &mut [T]) {
    let n_in = x.len();
    for (yo, wo) in y.iter_mut().zip(w.chunks_exact(n_in)) {
        *yo = dot(wo, x);
    }
}

#[inline]
pub fn linear_bias<T: Real>(w: &[T], b: &[T], x: &[T], y: &mut [T]) {
    linear(w, x, y);
    for (yo, bo) in y.iter_mut().zip(b) {
        *yo += *bo;
    }
}

/// Accumulates `dx += w^T dy` and `dw += dy x^T`.
#[inline]
pub fn linear_backward<T: Real>(w: &[T], x: &[T], dy: &[T], dx: &mut [T], dw: &mut [T]) {
    let n_in = x.len();
    for ((&g, wo), dwo) in dy.iter().zip(w.chunks_exact(n_in)).zip(dw.chunks_exact_mut(n_in)) {
        if g == T::zero() {
            continue;
        }
        axpy(g, wo, dx);
        axpy(g, x, dwo);
    }
}

/// Root-mean-square normalization with gain; returns the inverse RMS.
#[inline]
pub fn rmsnorm<T: Real>(x: &[T], gain: &[T], eps: T, y: &mut [T]) -> T {
    let ms = dot(x, x) / T::from_f64(x.len() as f64);
    let inv = T::one() / (ms + eps).sqrt();
    for ((yi, &xi), &gi) in y.iter_mut().zip(x).zip(gain) {
        *yi = xi * inv * gi;
    }
    inv
}

/// Accumulates input and gain gradients of [`rmsnorm`].
pub fn rmsnorm_backward<T: Real>(
    dy: &[T],
    x: &[T],
    gain: &[T],
    inv: T,
    dx: &mut [T],
    dgain: &mut [T],
) {
    let n = T::from_f64(x.len() as f64);
    let mut ux = T::zero();
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * inv;
        ux += dy[i] * gain[i] * x[i];
    }
    let coef = inv * inv * inv * ux / n;
    for i in 0..x.len() {
        dx[i] += inv * dy[i] * gain[i] - coef * x[i];
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Rotation angles for one position: `(cos, sin)` per pair within a head.
pub fn rope_angles<T: Real>(pos: usize, head_dim: usize, base: f64) -> Vec<(T, T)> {
    (0..head_dim / 2)
        .map(|i| {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let theta = pos as f64 * freq;
            (T::from_f64(theta.cos()), T::from_f64(theta.sin()))
        })
        .collect()
}

/// Rotates adjacent channel pairs of every head in place.
#[inline]
pub fn rope_apply<T: Real>(row: &mut [T], angles: &[(T, T)], head_dim: usize) {
    for head in row.chunks_exact_mut(head_dim) {
        for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(angles) {
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }
}

/// Inverse rotation, used to pull gradients back through [`rope_apply`].
#[inline]
pub fn rope_apply_transpose<T: Real>(row: &mut [T], angles: &[(T, T)], head_dim: usize) {
    for head in row.chunks_exact_mut(head_dim) {
        for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(angles) {
            let (g0, g1) = (pair[0], pair[1]);
            pair[0] = g0 * c + g1 * s;
            pair[1] = -g0 * s + g1 * c;
        }
    }
}

/// Causal attention output for position `p`. `keys` and `values` hold rows
/// `0..=p` with stride `q.len()`. `probs` receives `n_head x (p + 1)`
/// attention weights.
pub fn attend_row<T: Real>(
    q: &[T],
    keys: &[T],
    values: &[T],
    p: usize,
    n_head: usize,
    probs: &mut [T],
    out: &mut [T],
) {
    let d = q.len();
    let hd = d / n_head;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let span = p + 1;
    out.fill(T::zero());
    for h in 0..n_head {
        let qh = &q[h * hd..(h + 1) * hd];
        let ph = &mut probs[h * span..(h + 1) * span];
        let mut max = T::neg_infinity();
        for (t, s) in ph.iter_mut().enumerate() {
            *s = dot(qh, &keys[t * d + h * hd..t * d + (h + 1) * hd]) * scale;
            if *s > max {
                max = *s;
            }
        }
        let mut sum = T::zero();
        for s in ph.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = T::one() / sum;
        let oh = &mut out[h * hd..(h + 1) * hd];
        for (t, s) in ph.iter_mut().enumerate() {
            *s *= inv;
            axpy(*s, &values[t * d + h * hd..t * d + (h + 1) * hd], oh);
        }
    }
}

/// Log-softmax in place; returns the log-partition.
pub fn log_softmax<T: Real>(x: &mut [T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = x.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in x.iter_mut() {
        *v -= lse;
    }
    lse
}

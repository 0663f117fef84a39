//! Raw kernels behind the tape operations. Row-major throughout.

use rand::Rng;

use super::{lit, Real};
use crate::error::{Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = a[m,k] @ b[k,n] + beta * c`.
pub(crate) fn gemm_nn<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    beta: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `ga[m,k] += g[m,n] @ b[k,n]ᵀ`.
pub(crate) fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, g: &[T], b: &[T], ga: &mut [T]) {
    if m == 0 || k == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            n,
            k,
            T::one(),
            g.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            T::one(),
            ga.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `gb[k,n] += a[m,k]ᵀ @ g[m,n]`.
pub(crate) fn gemm_tn<T: Real>(k: usize, m: usize, n: usize, a: &[T], g: &[T], gb: &mut [T]) {
    if k == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            k,
            m,
            n,
            T::one(),
            a.as_ptr(),
            1,
            k as isize,
            g.as_ptr(),
            n as isize,
            1,
            T::one(),
            gb.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], x: &[T], alpha: T) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a = *a + alpha * b;
    }
}

#[inline]
pub(crate) fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half: T = lit(0.5);
    let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half: T = lit(0.5);
    let c: T = lit(GELU_C);
    let a: T = lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

/// Standard Gumbel(0, 1) draw.
pub(crate) fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval keeps both logs finite
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    rows: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut inv_std = vec![T::zero(); rows];
    let dn: T = lit(d as f64);
    let eps: T = lit(LAYER_NORM_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, inv_std)
}

pub(crate) fn layer_norm_backward_input<T: Real>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gain: &[T],
    d: usize,
    gx: &mut [T],
) {
    let dn: T = lit(d as f64);
    for (r, &is) in inv_std.iter().enumerate() {
        let gr = &g[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut sum_dy = T::zero();
        let mut sum_dy_x = T::zero();
        for j in 0..d {
            let dy = gr[j] * gain[j];
            sum_dy = sum_dy + dy;
            sum_dy_x = sum_dy_x + dy * xr[j];
        }
        for j in 0..d {
            let dy = gr[j] * gain[j];
            gx[r * d + j] = gx[r * d + j] + is * (dy - sum_dy / dn - xr[j] * sum_dy_x / dn);
        }
    }
}

pub(crate) fn split_heads<T: Real>(
    x: &[T],
    batch: usize,
    len: usize,
    heads: usize,
    dh: usize,
) -> Vec<T> {
    let d = heads * dh;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..len {
                let src = (b * len + t) * d + h * dh;
                let dst = ((b * heads + h) * len + t) * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

pub(crate) fn merge_heads<T: Real>(
    x: &[T],
    batch: usize,
    len: usize,
    heads: usize,
    dh: usize,
) -> Vec<T> {
    let d = heads * dh;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..len {
                let dst = (b * len + t) * d + h * dh;
                let src = ((b * heads + h) * len + t) * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

/// Column strides of `b` viewed as `[k, n]`.
fn b_strides(k: usize, n: usize, trans_b: bool) -> (isize, isize) {
    if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_forward<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    g: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    alpha: T,
) {
    let (rsb, csb) = b_strides(k, n, trans_b);
    for grp in 0..g {
        unsafe {
            T::gemm(
                m,
                k,
                n,
                alpha,
                a[grp * m * k..].as_ptr(),
                k as isize,
                1,
                b[grp * k * n..].as_ptr(),
                rsb,
                csb,
                T::zero(),
                out[grp * m * n..].as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// `ga += alpha * g @ Bᵀ` per group.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_grad_a<T: Real>(
    g: &[T],
    b: &[T],
    ga: &mut [T],
    grp: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    alpha: T,
) {
    let (rsb, csb) = b_strides(k, n, trans_b);
    for q in 0..grp {
        unsafe {
            // Bᵀ is [n, k] with strides swapped
            T::gemm(
                m,
                n,
                k,
                alpha,
                g[q * m * n..].as_ptr(),
                n as isize,
                1,
                b[q * k * n..].as_ptr(),
                csb,
                rsb,
                T::one(),
                ga[q * m * k..].as_mut_ptr(),
                k as isize,
                1,
            );
        }
    }
}

/// Gradient into `b` (stored `[k,n]`, or `[n,k]` when transposed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_grad_b<T: Real>(
    g: &[T],
    a: &[T],
    gb: &mut [T],
    grp: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    alpha: T,
) {
    let (rsb, csb) = b_strides(k, n, trans_b);
    for q in 0..grp {
        unsafe {
            // dB[k,n] = alpha * Aᵀ @ g, written through B's own strides
            T::gemm(
                k,
                m,
                n,
                alpha,
                a[q * m * k..].as_ptr(),
                1,
                k as isize,
                g[q * m * n..].as_ptr(),
                n as isize,
                1,
                T::one(),
                gb[q * k * n..].as_mut_ptr(),
                rsb,
                csb,
            );
        }
    }
}

/// Returns `(probs, unweighted)`; errors when a row has no positive keep weight.
pub(crate) fn masked_softmax_forward<T: Real>(
    scores: &[T],
    keep: &[T],
    groups: usize,
    rows: usize,
    l: usize,
    per: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut probs = vec![T::zero(); scores.len()];
    let mut unweighted = vec![T::zero(); scores.len()];
    let clamp: T = lit(80.0);
    for grp in 0..groups {
        let kr = &keep[(grp / per) * l..(grp / per + 1) * l];
        if !kr.iter().any(|&w| w > T::zero()) {
            return Err(Error::DegenerateMask(format!(
                "keep row {} has no kept position",
                grp / per
            )));
        }
        for r in 0..rows {
            let off = (grp * rows + r) * l;
            let s = &scores[off..off + l];
            let mut max = T::neg_infinity();
            for j in 0..l {
                if kr[j] > T::zero() && s[j] > max {
                    max = s[j];
                }
            }
            let mut z = T::zero();
            for j in 0..l {
                let e = (s[j] - max).min(clamp).exp();
                unweighted[off + j] = e;
                z = z + kr[j] * e;
            }
            for j in 0..l {
                let u = unweighted[off + j] / z;
                unweighted[off + j] = u;
                probs[off + j] = if kr[j] == T::zero() {
                    T::zero()
                } else {
                    kr[j] * u
                };
            }
        }
    }
    Ok((probs, unweighted))
}

pub(crate) fn masked_softmax_backward_scores<T: Real>(
    g: &[T],
    probs: &[T],
    groups: usize,
    rows: usize,
    l: usize,
    gs: &mut [T],
) {
    for off in (0..groups * rows).map(|r| r * l) {
        let p = &probs[off..off + l];
        let gr = &g[off..off + l];
        let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..l {
            gs[off + j] = gs[off + j] + p[j] * (gr[j] - dot);
        }
    }
}

/// `d keep_j = Σ_rows u_j (g_j - Σ_i p_i g_i)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn masked_softmax_backward_keep<T: Real>(
    g: &[T],
    probs: &[T],
    unweighted: &[T],
    groups: usize,
    rows: usize,
    l: usize,
    per: usize,
    gk: &mut [T],
) {
    for grp in 0..groups {
        let kk = grp / per;
        for r in 0..rows {
            let off = (grp * rows + r) * l;
            let p = &probs[off..off + l];
            let gr = &g[off..off + l];
            let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..l {
                gk[kk * l + j] = gk[kk * l + j] + unweighted[off + j] * (gr[j] - dot);
            }
        }
    }
}

pub(crate) fn cross_entropy_forward<T: Real>(
    logits: &[T],
    labels: &[usize],
    c: usize,
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        for j in 0..c {
            probs[r * c + j] = (row[j] - max).exp() / z;
        }
        total = total - (row[y] - max - z.ln());
    }
    let n = labels.len().max(1);
    (total / lit(n as f64), probs)
}

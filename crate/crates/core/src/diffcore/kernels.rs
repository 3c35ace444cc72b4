//! Slice-level kernels shared by the tape and the no-grad paths.
//!
//! All matrices are row-major. Shapes are passed explicitly and assumed checked by the caller.

use crate::Real;

/// `c[n, m] = a[n, k] * b[k, m]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `c[n, k] += a[n, m] * b[k, m]^T`.
pub fn matmul_nt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            c[i * k + j] += dot(arow, brow);
        }
    }
}

/// `c[k, m] += a[n, k]^T * b[n, m]`.
pub fn matmul_tn_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Returns `(u.v, |u|^2, |v|^2)`.
pub fn dot_norms<T: Real>(u: &[T], v: &[T]) -> (T, T, T) {
    (dot(u, v), dot(u, u), dot(v, v))
}

pub const GELU_COEF: f64 = 0.044715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_COEF) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::lit(GELU_COEF) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::lit(3.0 * GELU_COEF) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place softmax over each row of width `m`, with max subtraction.
pub fn softmax_rows<T: Real>(x: &mut [T], m: usize) {
    for row in x.chunks_mut(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Layer normalisation over rows of width `m`. Returns `(normalised, rstd per row)`.
pub fn layer_norm_rows<T: Real>(x: &[T], m: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / m;
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let mf = T::from_usize(m).unwrap();
    for r in 0..rows {
        let row = &x[r * m..(r + 1) * m];
        let mean = row.iter().copied().sum::<T>() / mf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
        let rs = T::one() / (var + eps).sqrt();
        for (o, &v) in out[r * m..(r + 1) * m].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (out, rstd)
}

/// Multi-head scaled dot-product attention over `n` tokens of width `d`.
///
/// Returns the output `[n, d]` and the attention probabilities `[heads, n, n]`.
pub fn attention<T: Real>(q: &[T], k: &[T], v: &[T], n: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        let off = h * dh;
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..n {
                p[i * n + j] = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
            }
        }
        softmax_rows(p, n);
        for i in 0..n {
            let orow = &mut out[i * d + off..i * d + off + dh];
            for j in 0..n {
                let pij = p[i * n + j];
                for (o, &vv) in orow.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                    *o += pij * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention`]: accumulates into `gq`, `gk`, `gv` when present.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    n: usize,
    d: usize,
    heads: usize,
    mut gq: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
    mut gv: Option<&mut [T]>,
) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut ds = vec![T::zero(); n * n];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * n * n..(h + 1) * n * n];
        if let Some(gv) = gv.as_deref_mut() {
            // dV = P^T dO
            for i in 0..n {
                let gi = &g[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let pij = p[i * n + j];
                    for (a, &b) in gv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *a += pij * b;
                    }
                }
            }
        }
        if gq.is_none() && gk.is_none() {
            continue;
        }
        // dP = dO V^T, dS = P * (dP - rowsum(dP * P))
        for i in 0..n {
            let gi = &g[i * d + off..i * d + off + dh];
            let mut rs = T::zero();
            for j in 0..n {
                let dp = dot(gi, &v[j * d + off..j * d + off + dh]);
                ds[i * n + j] = dp;
                rs += dp * p[i * n + j];
            }
            for j in 0..n {
                ds[i * n + j] = p[i * n + j] * (ds[i * n + j] - rs) * scale;
            }
        }
        if let Some(gq) = gq.as_deref_mut() {
            for i in 0..n {
                for j in 0..n {
                    let s = ds[i * n + j];
                    for (a, &b) in gq[i * d + off..i * d + off + dh].iter_mut().zip(&k[j * d + off..j * d + off + dh]) {
                        *a += s * b;
                    }
                }
            }
        }
        if let Some(gk) = gk.as_deref_mut() {
            for i in 0..n {
                for j in 0..n {
                    let s = ds[i * n + j];
                    for (a, &b) in gk[j * d + off..j * d + off + dh].iter_mut().zip(&q[i * d + off..i * d + off + dh]) {
                        *a += s * b;
                    }
                }
            }
        }
    }
}

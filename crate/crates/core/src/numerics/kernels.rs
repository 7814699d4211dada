//! Dtype-generic dense kernels. Every kernel fixes its summation order so
//! that row-wise evaluation of a batch is bit-identical to evaluating each
//! row on its own.

use num_traits::Float;
use std::fmt::Debug;

pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// `op(a)[m,k] · op(b)[k,n]`, where `op` optionally transposes the stored
/// row-major operand. Accumulation runs over `k` in increasing order.
pub fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    a_t: bool,
    b_t: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = if a_t { a[p * m + i] } else { a[i * k + p] };
            if b_t {
                for (j, o) in row.iter_mut().enumerate() {
                    *o = *o + av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Unary {
    Silu,
    Relu,
    Softplus,
    Exp,
    Sigmoid,
    Neg,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn unary_fwd<T: Scalar>(kind: Unary, x: &[T]) -> Vec<T> {
    match kind {
        Unary::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
        Unary::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
        Unary::Softplus => x.iter().map(|&v| softplus(v)).collect(),
        Unary::Exp => x.iter().map(|&v| v.exp()).collect(),
        Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        Unary::Neg => x.iter().map(|&v| -v).collect(),
    }
}

/// Gradient of a pointwise function given the upstream gradient, the input
/// and the forward output.
pub fn unary_bwd<T: Scalar>(kind: Unary, g: &[T], x: &[T], y: &[T]) -> Vec<T> {
    let one = T::one();
    g.iter()
        .zip(x)
        .zip(y)
        .map(|((&g, &x), &y)| match kind {
            Unary::Silu => {
                let s = sigmoid(x);
                g * s * (one + x * (one - s))
            }
            Unary::Relu => {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Unary::Softplus => g * sigmoid(x),
            Unary::Exp => g * y,
            Unary::Sigmoid => g * y * (one - y),
            Unary::Neg => -g,
        })
        .collect()
}

pub fn rms_norm_fwd<T: Scalar>(x: &[T], gamma: &[T], d: usize, eps: f64) -> Vec<T> {
    let eps = T::from_f64(eps);
    let dn = T::from_f64(d as f64);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
        let inv = T::one() / (ms + eps).sqrt();
        out.extend(row.iter().zip(gamma).map(|(&v, &g)| v * inv * g));
    }
    out
}

/// Returns `(dx, dgamma)`.
pub fn rms_norm_bwd<T: Scalar>(
    g: &[T],
    x: &[T],
    gamma: &[T],
    d: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64(eps);
    let dn = T::from_f64(d as f64);
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![T::zero(); d];
    for (row, grow) in x.chunks(d).zip(g.chunks(d)) {
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
        let inv = T::one() / (ms + eps).sqrt();
        let mut dot = T::zero();
        for j in 0..d {
            let xh = row[j] * inv;
            dot = dot + grow[j] * gamma[j] * xh;
            dgamma[j] = dgamma[j] + grow[j] * xh;
        }
        let mean_dot = dot / dn;
        for j in 0..d {
            let xh = row[j] * inv;
            dx.push(inv * (grow[j] * gamma[j] - xh * mean_dot));
        }
    }
    (dx, dgamma)
}

pub fn layer_norm_fwd<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], d: usize, eps: f64) -> Vec<T> {
    let eps = T::from_f64(eps);
    let dn = T::from_f64(d as f64);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
        let inv = T::one() / (var + eps).sqrt();
        for j in 0..d {
            out.push((row[j] - mean) * inv * gamma[j] + beta[j]);
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_bwd<T: Scalar>(
    g: &[T],
    x: &[T],
    gamma: &[T],
    d: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::from_f64(eps);
    let dn = T::from_f64(d as f64);
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for (row, grow) in x.chunks(d).zip(g.chunks(d)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
        let inv = T::one() / (var + eps).sqrt();
        let mut sum_gg = T::zero();
        let mut sum_ggx = T::zero();
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            let gg = grow[j] * gamma[j];
            sum_gg = sum_gg + gg;
            sum_ggx = sum_ggx + gg * xh;
            dgamma[j] = dgamma[j] + grow[j] * xh;
            dbeta[j] = dbeta[j] + grow[j];
        }
        let m1 = sum_gg / dn;
        let m2 = sum_ggx / dn;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            dx.push(inv * (grow[j] * gamma[j] - m1 - xh * m2));
        }
    }
    (dx, dgamma, dbeta)
}

pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let m = x.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let s = x.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
    m + s.ln()
}

pub fn cross_entropy_fwd<T: Scalar>(logits: &[T], target: usize) -> T {
    log_sum_exp(logits) - logits[target]
}

pub fn cross_entropy_bwd<T: Scalar>(g: T, logits: &[T], target: usize) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (v - lse).exp();
            let t = if i == target { T::one() } else { T::zero() };
            g * (p - t)
        })
        .collect()
}

/// Depthwise "valid" convolution along rows: `xe` is `[t + k - 1, d]`,
/// `w` is `[k, d]`, output is `[t, d]`.
pub fn depthwise_fwd<T: Scalar>(xe: &[T], w: &[T], bias: &[T], t: usize, k: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(t * d);
    for r in 0..t {
        for c in 0..d {
            let mut acc = T::zero();
            for i in 0..k {
                acc = acc + w[i * d + c] * xe[(r + i) * d + c];
            }
            out.push(acc + bias[c]);
        }
    }
    out
}

/// Returns `(dxe, dw, dbias)`.
pub fn depthwise_bwd<T: Scalar>(
    g: &[T],
    xe: &[T],
    w: &[T],
    t: usize,
    k: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dxe = vec![T::zero(); (t + k - 1) * d];
    let mut dw = vec![T::zero(); k * d];
    let mut db = vec![T::zero(); d];
    for r in 0..t {
        for c in 0..d {
            let gv = g[r * d + c];
            db[c] = db[c] + gv;
            for i in 0..k {
                dxe[(r + i) * d + c] = dxe[(r + i) * d + c] + gv * w[i * d + c];
                dw[i * d + c] = dw[i * d + c] + gv * xe[(r + i) * d + c];
            }
        }
    }
    (dxe, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }

    fn src(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.sh + ky) as isize - self.ph as isize;
        let x = (ox * self.sw + kx) as isize - self.pw as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

pub fn conv2d_fwd<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &Conv2dGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.c_out * oh * ow);
    for co in 0..g.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((y, xx)) = g.src(oy, ky, ox, kx) {
                                let wv = w[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                                acc = acc + wv * x[(ci * g.h + y) * g.w + xx];
                            }
                        }
                    }
                }
                out.push(acc + b[co]);
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_bwd<T: Scalar>(gr: &[T], x: &[T], w: &[T], g: &Conv2dGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.c_out];
    for co in 0..g.c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gr[(co * oh + oy) * ow + ox];
                db[co] = db[co] + gv;
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some((y, xx)) = g.src(oy, ky, ox, kx) {
                                let wi = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                                let xi = (ci * g.h + y) * g.w + xx;
                                dw[wi] = dw[wi] + gv * x[xi];
                                dx[xi] = dx[xi] + gv * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transpose_flags_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let ab = gemm(&a, &b, 2, 3, 2, false, false);
        assert_eq!(ab, vec![58.0, 64.0, 139.0, 154.0]);
        // a^T stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(gemm(&at, &b, 2, 3, 2, true, false), ab);
        // b^T stored as 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(gemm(&a, &bt, 2, 3, 2, false, true), ab);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert_eq!(softplus(0.0f64), std::f64::consts::LN_2);
    }

    #[test]
    fn conv_geometry_ceil_halving() {
        let g = Conv2dGeom { c_in: 1, h: 81, w: 10, c_out: 1, kh: 3, kw: 3, sh: 2, sw: 2, ph: 1, pw: 1 };
        assert_eq!(g.out_h(), 41);
        assert_eq!(g.out_w(), 5);
    }
}

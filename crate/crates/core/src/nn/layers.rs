//! Forward and backward kernels for the layers of the temporal U-Net.
//!
//! Feature maps are stored channel-major, `[channel][batch][time]`, so that a
//! convolution over the whole batch is a single matrix product.

use super::params::{Gradients, ParamId, ParameterStore};
use super::real::{matmul, Real};

/// Channel-major feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<R> {
    pub c: usize,
    pub b: usize,
    pub t: usize,
    pub data: Vec<R>,
}

impl<R: Real> Feat<R> {
    pub fn zeros(c: usize, b: usize, t: usize) -> Self {
        Self { c, b, t, data: vec![R::zero(); c * b * t] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Stacks channels of `self` above channels of `other`.
    pub fn concat_channels(&self, other: &Feat<R>) -> Feat<R> {
        assert_eq!((self.b, self.t), (other.b, other.t));
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Feat { c: self.c + other.c, b: self.b, t: self.t, data }
    }

    pub fn split_channels(self, c_first: usize) -> (Feat<R>, Feat<R>) {
        let at = c_first * self.b * self.t;
        let mut head = self.data;
        let tail = head.split_off(at);
        (
            Feat { c: c_first, b: self.b, t: self.t, data: head },
            Feat { c: self.c - c_first, b: self.b, t: self.t, data: tail },
        )
    }
}

/// Batch-major matrix of vectors, `[batch][features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows<R> {
    pub b: usize,
    pub f: usize,
    pub data: Vec<R>,
}

// ---------------------------------------------------------------------------
// Mish

/// `tanh(softplus(x))` and `e^x`, via `tanh(ln(1 + e)) = n / (n + 2)` with `n = e (e + 2)`.
#[inline]
fn tanh_softplus<R: Real>(x: R) -> (R, R) {
    if x > R::lit(20.0) {
        return (R::one(), R::infinity());
    }
    let e = x.exp();
    let n = e * (e + R::lit(2.0));
    (n / (n + R::lit(2.0)), e)
}

pub fn mish<R: Real>(x: R) -> R {
    x * tanh_softplus(x).0
}

pub fn mish_grad<R: Real>(x: R) -> R {
    let (t, e) = tanh_softplus(x);
    if !e.is_finite() {
        return R::one();
    }
    let sig = e / (R::one() + e);
    t + x * (R::one() - t * t) * sig
}

pub fn mish_forward<R: Real>(x: &[R]) -> Vec<R> {
    x.iter().map(|&v| mish(v)).collect()
}

/// `dy` is overwritten with the gradient with respect to the Mish input `x`.
pub fn mish_backward<R: Real>(x: &[R], dy: &mut [R]) {
    for (d, &v) in dy.iter_mut().zip(x) {
        *d *= mish_grad(v);
    }
}

// ---------------------------------------------------------------------------
// Conv1d

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<R> {
    col: Vec<R>,
    t_in: usize,
}

impl Conv1d {
    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output positions `to` whose input index `to * stride + kk - pad` lies in `0..t_in`.
    fn valid_range(&self, kk: usize, t_in: usize, t_out: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kk).div_ceil(s);
        let hi = (t_in + self.pad).saturating_sub(kk).div_ceil(s).min(t_out);
        lo..hi.max(lo)
    }

    fn im2col<R: Real>(&self, x: &Feat<R>, t_out: usize) -> Vec<R> {
        let (b, k) = (x.b, self.kernel);
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return x.data.clone();
        }
        let cols = b * t_out;
        let mut col = vec![R::zero(); self.c_in * k * cols];
        for ci in 0..self.c_in {
            for kk in 0..k {
                let range = self.valid_range(kk, x.t, t_out);
                let row = &mut col[(ci * k + kk) * cols..(ci * k + kk + 1) * cols];
                for bi in 0..b {
                    let src = &x.data[(ci * b + bi) * x.t..(ci * b + bi + 1) * x.t];
                    let dst = &mut row[bi * t_out..(bi + 1) * t_out];
                    if self.stride == 1 {
                        let off = range.start + kk - self.pad;
                        dst[range.clone()].copy_from_slice(&src[off..off + range.len()]);
                    } else {
                        for to in range.clone() {
                            dst[to] = src[to * self.stride + kk - self.pad];
                        }
                    }
                }
            }
        }
        col
    }

    pub fn forward<R: Real>(&self, p: &ParameterStore<R>, x: &Feat<R>) -> (Feat<R>, ConvCache<R>) {
        assert_eq!(x.c, self.c_in, "conv input channels");
        let t_out = self.out_len(x.t);
        let cols = x.b * t_out;
        let col = self.im2col(x, t_out);
        let mut out = Feat::zeros(self.c_out, x.b, t_out);
        let bias = p.get(self.bias);
        for (co, chunk) in out.data.chunks_mut(cols).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        matmul(self.c_out, cols, self.c_in * self.kernel, p.get(self.weight), false, &col, false, R::one(), &mut out.data);
        (out, ConvCache { col, t_in: x.t })
    }

    pub fn backward<R: Real>(
        &self,
        p: &ParameterStore<R>,
        g: &mut Gradients<R>,
        cache: &ConvCache<R>,
        dout: &Feat<R>,
    ) -> Feat<R> {
        let (b, t_out, k) = (dout.b, dout.t, self.kernel);
        let cols = b * t_out;
        let ck = self.c_in * k;
        matmul(self.c_out, ck, cols, &dout.data, false, &cache.col, true, R::one(), g.get_mut(self.weight));
        let db = g.get_mut(self.bias);
        for (co, chunk) in dout.data.chunks(cols).enumerate() {
            db[co] += chunk.iter().copied().sum::<R>();
        }
        let mut dcol = vec![R::zero(); ck * cols];
        matmul(ck, cols, self.c_out, p.get(self.weight), true, &dout.data, false, R::zero(), &mut dcol);
        if k == 1 && self.stride == 1 && self.pad == 0 {
            return Feat { c: self.c_in, b, t: cache.t_in, data: dcol };
        }
        let mut dx = Feat::zeros(self.c_in, b, cache.t_in);
        for ci in 0..self.c_in {
            for kk in 0..k {
                let range = self.valid_range(kk, cache.t_in, t_out);
                let row = &dcol[(ci * k + kk) * cols..(ci * k + kk + 1) * cols];
                for bi in 0..b {
                    let dst = &mut dx.data[(ci * b + bi) * cache.t_in..(ci * b + bi + 1) * cache.t_in];
                    let src = &row[bi * t_out..(bi + 1) * t_out];
                    for to in range.clone() {
                        dst[to * self.stride + kk - self.pad] += src[to];
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// ConvTranspose1d, weight stored `[c_in][c_out][kernel]`

#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvTCache<R> {
    x: Feat<R>,
}

impl ConvTranspose1d {
    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in - 1) * self.stride + self.kernel - 2 * self.pad
    }

    pub fn forward<R: Real>(&self, p: &ParameterStore<R>, x: &Feat<R>) -> (Feat<R>, ConvTCache<R>) {
        assert_eq!(x.c, self.c_in, "transposed conv input channels");
        let (b, k) = (x.b, self.kernel);
        let t_out = self.out_len(x.t);
        let cols_in = b * x.t;
        let ck = self.c_out * k;
        let mut cols = vec![R::zero(); ck * cols_in];
        matmul(ck, cols_in, self.c_in, p.get(self.weight), true, &x.data, false, R::zero(), &mut cols);
        let mut out = Feat::zeros(self.c_out, b, t_out);
        let bias = p.get(self.bias);
        for co in 0..self.c_out {
            for bi in 0..b {
                let dst = &mut out.data[(co * b + bi) * t_out..(co * b + bi + 1) * t_out];
                dst.iter_mut().for_each(|v| *v = bias[co]);
                for kk in 0..k {
                    let row = &cols[(co * k + kk) * cols_in + bi * x.t..(co * k + kk) * cols_in + (bi + 1) * x.t];
                    for (ti, &v) in row.iter().enumerate() {
                        let to = (ti * self.stride + kk) as isize - self.pad as isize;
                        if to >= 0 && (to as usize) < t_out {
                            dst[to as usize] += v;
                        }
                    }
                }
            }
        }
        (out, ConvTCache { x: x.clone() })
    }

    pub fn backward<R: Real>(
        &self,
        p: &ParameterStore<R>,
        g: &mut Gradients<R>,
        cache: &ConvTCache<R>,
        dout: &Feat<R>,
    ) -> Feat<R> {
        let x = &cache.x;
        let (b, k, t_in, t_out) = (x.b, self.kernel, x.t, dout.t);
        let cols_in = b * t_in;
        let ck = self.c_out * k;
        let mut dcols = vec![R::zero(); ck * cols_in];
        let db = g.get_mut(self.bias);
        for co in 0..self.c_out {
            for bi in 0..b {
                let src = &dout.data[(co * b + bi) * t_out..(co * b + bi + 1) * t_out];
                db[co] += src.iter().copied().sum::<R>();
                for kk in 0..k {
                    let row = &mut dcols[(co * k + kk) * cols_in + bi * t_in..(co * k + kk) * cols_in + (bi + 1) * t_in];
                    for (ti, v) in row.iter_mut().enumerate() {
                        let to = (ti * self.stride + kk) as isize - self.pad as isize;
                        if to >= 0 && (to as usize) < t_out {
                            *v = src[to as usize];
                        }
                    }
                }
            }
        }
        matmul(self.c_in, ck, cols_in, &x.data, false, &dcols, true, R::one(), g.get_mut(self.weight));
        let mut dx = Feat::zeros(self.c_in, b, t_in);
        matmul(self.c_in, cols_in, ck, p.get(self.weight), false, &dcols, false, R::zero(), &mut dx.data);
        dx
    }
}

// ---------------------------------------------------------------------------
// GroupNorm

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub struct GnCache<R> {
    xhat: Vec<R>,
    rstd: Vec<R>,
}

impl GroupNorm {
    pub fn forward<R: Real>(&self, p: &ParameterStore<R>, x: &Feat<R>) -> (Feat<R>, GnCache<R>) {
        assert_eq!(x.c, self.channels, "group norm channels");
        let (b, t) = (x.b, x.t);
        let cg = self.channels / self.groups;
        let n = R::lit((cg * t) as f64);
        let mut xhat = vec![R::zero(); x.len()];
        let mut rstd = vec![R::zero(); b * self.groups];
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let mut out = Feat::zeros(x.c, b, t);
        for g in 0..self.groups {
            for bi in 0..b {
                let rows = || (g * cg..(g + 1) * cg).map(move |c| (c * b + bi) * t);
                let mean = rows().map(|o| x.data[o..o + t].iter().copied().sum::<R>()).sum::<R>() / n;
                let var = rows()
                    .map(|o| x.data[o..o + t].iter().map(|&v| (v - mean) * (v - mean)).sum::<R>())
                    .sum::<R>()
                    / n;
                let rs = R::one() / (var + R::lit(GROUP_NORM_EPS)).sqrt();
                rstd[bi * self.groups + g] = rs;
                for (c, o) in (g * cg..(g + 1) * cg).zip(rows()) {
                    for i in o..o + t {
                        let h = (x.data[i] - mean) * rs;
                        xhat[i] = h;
                        out.data[i] = h * gamma[c] + beta[c];
                    }
                }
            }
        }
        (out, GnCache { xhat, rstd })
    }

    pub fn backward<R: Real>(
        &self,
        p: &ParameterStore<R>,
        g: &mut Gradients<R>,
        cache: &GnCache<R>,
        dout: &Feat<R>,
    ) -> Feat<R> {
        let (b, t) = (dout.b, dout.t);
        let cg = self.channels / self.groups;
        let n = R::lit((cg * t) as f64);
        let gamma = p.get(self.gamma);
        {
            let (dgamma, dbeta) = g.get_pair_mut(self.gamma, self.beta);
            for c in 0..self.channels {
                let o = c * b * t;
                let (mut sg, mut sb) = (R::zero(), R::zero());
                for i in o..o + b * t {
                    sg += dout.data[i] * cache.xhat[i];
                    sb += dout.data[i];
                }
                dgamma[c] += sg;
                dbeta[c] += sb;
            }
        }
        let mut dx = Feat::zeros(self.channels, b, t);
        for grp in 0..self.groups {
            for bi in 0..b {
                let rs = cache.rstd[bi * self.groups + grp];
                let (mut s1, mut s2) = (R::zero(), R::zero());
                for c in grp * cg..(grp + 1) * cg {
                    let o = (c * b + bi) * t;
                    for i in o..o + t {
                        let dh = dout.data[i] * gamma[c];
                        s1 += dh;
                        s2 += dh * cache.xhat[i];
                    }
                }
                for c in grp * cg..(grp + 1) * cg {
                    let o = (c * b + bi) * t;
                    for i in o..o + t {
                        let dh = dout.data[i] * gamma[c];
                        dx.data[i] = rs / n * (n * dh - s1 - cache.xhat[i] * s2);
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear on batch-major rows, weight stored `[out][in]`

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward<R: Real>(&self, p: &ParameterStore<R>, x: &Rows<R>) -> Rows<R> {
        assert_eq!(x.f, self.d_in, "linear input width");
        let mut data = Vec::with_capacity(x.b * self.d_out);
        let bias = p.get(self.bias);
        for _ in 0..x.b {
            data.extend_from_slice(bias);
        }
        matmul(x.b, self.d_out, self.d_in, &x.data, false, p.get(self.weight), true, R::one(), &mut data);
        Rows { b: x.b, f: self.d_out, data }
    }

    pub fn backward<R: Real>(
        &self,
        p: &ParameterStore<R>,
        g: &mut Gradients<R>,
        x: &Rows<R>,
        dy: &Rows<R>,
    ) -> Rows<R> {
        matmul(self.d_out, self.d_in, x.b, &dy.data, true, &x.data, false, R::one(), g.get_mut(self.weight));
        let db = g.get_mut(self.bias);
        for row in dy.data.chunks(self.d_out) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        let mut dx = vec![R::zero(); x.b * self.d_in];
        matmul(x.b, self.d_in, self.d_out, &dy.data, false, p.get(self.weight), false, R::zero(), &mut dx);
        Rows { b: x.b, f: self.d_in, data: dx }
    }
}

// ---------------------------------------------------------------------------
// FiLM: per-sample, per-channel scale and shift

/// `y[c,b,t] = scale[b,c] * x[c,b,t] + shift[b,c]`, where `film` rows hold
/// `C` scales followed by `C` shifts.
pub fn film_forward<R: Real>(x: &Feat<R>, film: &Rows<R>) -> Feat<R> {
    assert_eq!(film.f, 2 * x.c, "film projection width");
    assert_eq!(film.b, x.b, "film batch");
    let mut out = Feat::zeros(x.c, x.b, x.t);
    for c in 0..x.c {
        for bi in 0..x.b {
            let (s, h) = (film.data[bi * film.f + c], film.data[bi * film.f + x.c + c]);
            let o = (c * x.b + bi) * x.t;
            for i in o..o + x.t {
                out.data[i] = s * x.data[i] + h;
            }
        }
    }
    out
}

/// Returns `(dx, dfilm)`.
pub fn film_backward<R: Real>(x: &Feat<R>, film: &Rows<R>, dy: &Feat<R>) -> (Feat<R>, Rows<R>) {
    let mut dx = Feat::zeros(x.c, x.b, x.t);
    let mut df = Rows { b: film.b, f: film.f, data: vec![R::zero(); film.data.len()] };
    for c in 0..x.c {
        for bi in 0..x.b {
            let s = film.data[bi * film.f + c];
            let o = (c * x.b + bi) * x.t;
            let (mut ds, mut dh) = (R::zero(), R::zero());
            for i in o..o + x.t {
                dx.data[i] = s * dy.data[i];
                ds += dy.data[i] * x.data[i];
                dh += dy.data[i];
            }
            df.data[bi * film.f + c] += ds;
            df.data[bi * film.f + x.c + c] += dh;
        }
    }
    (dx, df)
}

//! Batched forward and backward passes.
//!
//! Activations are stored channel-major as `(C, B, H, W)`, so a 3×3 convolution
//! is one GEMM between the `(C_out, 9·C_in)` weight matrix and the im2col buffer
//! `(9·C_in, B·H·W)`, and channel concatenation is buffer concatenation.

use super::{sinusoidal_embed, slot, DenoiserParams};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymMatrix};

#[derive(Clone)]
struct Act {
    c: usize,
    b: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Act {
    fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self { c, b, h, w, data: vec![0.0; c * b * h * w] }
    }

    fn plane(&self) -> usize {
        self.b * self.h * self.w
    }

    fn concat(a: &Act, b: &Act) -> Act {
        debug_assert_eq!((a.b, a.h, a.w), (b.b, b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Act { c: a.c + b.c, b: a.b, h: a.h, w: a.w, data }
    }

    fn split(self, c_first: usize) -> (Act, Act) {
        let at = c_first * self.plane();
        let Act { c, b, h, w, mut data } = self;
        let rest = data.split_off(at);
        (Act { c: c_first, b, h, w, data }, Act { c: c - c_first, b, h, w, data: rest })
    }
}

/// Row-major view of a matrix inside a slice: `(rows, cols, row stride)`.
#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    stride: usize,
    trans: bool,
}

impl View {
    fn dense(rows: usize, cols: usize) -> Self {
        Self { rows, cols, stride: cols, trans: false }
    }

    fn strided(rows: usize, cols: usize, stride: usize) -> Self {
        Self { rows, cols, stride, trans: false }
    }

    fn t(self) -> Self {
        Self { trans: !self.trans, ..self }
    }

    /// Shape after the optional transpose.
    fn shape(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.stride as isize)
        } else {
            (self.stride as isize, 1)
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 { 0 } else { (self.rows - 1) * self.stride + self.cols }
    }
}

/// `c ← alpha · a · b + beta · c` for strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(alpha: f64, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    let (m, k) = av.shape();
    let (k2, n) = bv.shape();
    assert!(k == k2 && cv.shape() == (m, n) && !cv.trans);
    assert!(a.len() >= av.extent() && b.len() >= bv.extent() && c.len() >= cv.extent());
    let (rsa, csa) = av.strides();
    let (rsb, csb) = bv.strides();
    // SAFETY: the asserts above bound every access made through these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            cv.stride as isize,
            1,
        );
    }
}

fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Output columns `ox` whose input column `ox·stride + kx − 1` lies inside `0..w`.
fn valid_range(wo: usize, w: usize, stride: usize, kx: usize) -> std::ops::Range<usize> {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = ((w - kx) / stride + 1).min(wo);
    lo..hi.max(lo)
}

/// Samples per convolution chunk, sized so one im2col buffer stays a few MB.
fn chunk_samples(ho: usize, wo: usize, batch: usize) -> usize {
    (2048 / (ho * wo)).clamp(1, batch)
}

/// 3×3 patches of samples `b0..b1` with zero padding 1, rows ordered `(c_in, ky, kx)`.
/// `col` must hold `9·c_in × (b1−b0)·ho·wo` values and is overwritten.
fn im2col(x: &Act, stride: usize, b0: usize, b1: usize, col: &mut [f64]) {
    let (ho, wo) = (out_size(x.h, stride), out_size(x.w, stride));
    let n = (b1 - b0) * ho * wo;
    let plane = x.plane();
    col[..x.c * 9 * n].fill(0.0);
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * n..][..n];
                let xs = valid_range(wo, x.w, stride, kx);
                for bi in b0..b1 {
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy == 0 || iy > x.h {
                            continue;
                        }
                        let src = &x.data[ci * plane + bi * x.h * x.w + (iy - 1) * x.w..][..x.w];
                        let dst = &mut row[((bi - b0) * ho + oy) * wo..][..wo];
                        if stride == 1 {
                            dst[xs.clone()].copy_from_slice(&src[xs.start + kx - 1..xs.end + kx - 1]);
                        } else {
                            for ox in xs.clone() {
                                dst[ox] = src[ox * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds the patches in `col` back into samples `b0..b1` of `x`.
fn col2im(col: &[f64], x: &mut Act, stride: usize, b0: usize, b1: usize) {
    let (h, w) = (x.h, x.w);
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let n = (b1 - b0) * ho * wo;
    let plane = x.plane();
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * n..][..n];
                let xs = valid_range(wo, w, stride, kx);
                for bi in b0..b1 {
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        let dst = &mut x.data[ci * plane + bi * h * w + (iy - 1) * w..][..w];
                        let src = &row[((bi - b0) * ho + oy) * wo..][..wo];
                        if stride == 1 {
                            let d = &mut dst[xs.start + kx - 1..xs.end + kx - 1];
                            d.iter_mut().zip(&src[xs.clone()]).for_each(|(a, b)| *a += b);
                        } else {
                            for ox in xs.clone() {
                                dst[ox * stride + kx - 1] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Act, w: &[f64], bias: &[f64], stride: usize) -> Act {
    let cout = bias.len();
    let kdim = x.c * 9;
    let (ho, wo) = (out_size(x.h, stride), out_size(x.w, stride));
    let mut out = Act::zeros(cout, x.b, ho, wo);
    let n = out.plane();
    for (co, row) in out.data.chunks_exact_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    let per = chunk_samples(ho, wo, x.b);
    let mut col = vec![0.0; kdim * per * ho * wo];
    for b0 in (0..x.b).step_by(per) {
        let b1 = (b0 + per).min(x.b);
        let nc = (b1 - b0) * ho * wo;
        im2col(x, stride, b0, b1, &mut col);
        let off = b0 * ho * wo;
        gemm(
            1.0,
            w,
            View::dense(cout, kdim),
            &col,
            View::dense(kdim, nc),
            1.0,
            &mut out.data[off..],
            View::strided(cout, nc, n),
        );
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient if asked.
fn conv_backward(x: &Act, w: &[f64], dout: &Act, stride: usize, dwb: &mut [f64], want_dx: bool) -> Option<Act> {
    let cout = dout.c;
    let kdim = x.c * 9;
    let (dw, db) = dwb.split_at_mut(cout * kdim);
    let (ho, wo) = (dout.h, dout.w);
    let n = dout.plane();
    for (co, row) in dout.data.chunks_exact(n).enumerate() {
        db[co] += row.iter().sum::<f64>();
    }
    let per = chunk_samples(ho, wo, x.b);
    let mut col = vec![0.0; kdim * per * ho * wo];
    let mut dx = want_dx.then(|| Act::zeros(x.c, x.b, x.h, x.w));
    for b0 in (0..x.b).step_by(per) {
        let b1 = (b0 + per).min(x.b);
        let nc = (b1 - b0) * ho * wo;
        let off = b0 * ho * wo;
        let dv = View::strided(cout, nc, n);
        im2col(x, stride, b0, b1, &mut col);
        gemm(1.0, &dout.data[off..], dv, &col, View::dense(kdim, nc).t(), 1.0, dw, View::dense(cout, kdim));
        if let Some(dx) = dx.as_mut() {
            gemm(1.0, w, View::dense(cout, kdim).t(), &dout.data[off..], dv, 0.0, &mut col, View::dense(kdim, nc));
            col2im(&col, dx, stride, b0, b1);
        }
    }
    dx
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

fn silu_act(z: &Act) -> Act {
    Act { data: z.data.iter().map(|&v| silu(v)).collect(), ..*z }
}

/// `dz = da ⊙ SiLU'(z)`.
fn silu_back(z: &Act, da: &Act) -> Act {
    Act {
        data: z.data.iter().zip(&da.data).map(|(&z, &d)| d * silu_grad(z)).collect(),
        ..*z
    }
}

/// Adds per-(channel, sample) bias `t` (`C × B`, row-major) to every pixel.
fn add_step_bias(z: &mut Act, t: &[f64]) {
    let hw = z.h * z.w;
    for c in 0..z.c {
        for bi in 0..z.b {
            let v = t[c * z.b + bi];
            z.data[(c * z.b + bi) * hw..][..hw].iter_mut().for_each(|x| *x += v);
        }
    }
}

fn step_bias_grad(dz: &Act) -> Vec<f64> {
    let hw = dz.h * dz.w;
    dz.data.chunks_exact(hw).map(|px| px.iter().sum()).collect()
}

fn upsample(x: &Act) -> Act {
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut out = Act::zeros(x.c, x.b, h, w);
    for cb in 0..x.c * x.b {
        let src = &x.data[cb * x.h * x.w..][..x.h * x.w];
        let dst = &mut out.data[cb * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

fn upsample_back(d: &Act) -> Act {
    let (h, w) = (d.h / 2, d.w / 2);
    let mut out = Act::zeros(d.c, d.b, h, w);
    for cb in 0..d.c * d.b {
        let src = &d.data[cb * d.h * d.w..][..d.h * d.w];
        let dst = &mut out.data[cb * h * w..][..h * w];
        for y in 0..d.h {
            for xx in 0..d.w {
                dst[(y / 2) * w + xx / 2] += src[y * d.w + xx];
            }
        }
    }
    out
}

/// Dense layer over a batch stored as `(in, B)`: returns `W·x + b` as `(out, B)`.
fn dense(w: &[f64], bias: &[f64], x: &[f64], d_in: usize, batch: usize) -> Vec<f64> {
    let d_out = bias.len();
    let mut out: Vec<f64> = bias.iter().flat_map(|&v| std::iter::repeat(v).take(batch)).collect();
    gemm(1.0, w, View::dense(d_out, d_in), x, View::dense(d_in, batch), 1.0, &mut out, View::dense(d_out, batch));
    out
}

/// Accumulates dense-layer gradients and returns `Wᵀ·dy`.
fn dense_back(w: &[f64], x: &[f64], dy: &[f64], d_in: usize, batch: usize, dwb: &mut [f64]) -> Vec<f64> {
    let d_out = dy.len() / batch;
    let (dw, db) = dwb.split_at_mut(d_out * d_in);
    gemm(1.0, dy, View::dense(d_out, batch), x, View::dense(d_in, batch).t(), 1.0, dw, View::dense(d_out, d_in));
    for (o, row) in dy.chunks_exact(batch).enumerate() {
        db[o] += row.iter().sum::<f64>();
    }
    let mut dx = vec![0.0; d_in * batch];
    gemm(1.0, w, View::dense(d_out, d_in).t(), dy, View::dense(d_out, batch), 0.0, &mut dx, View::dense(d_in, batch));
    dx
}

struct Cache {
    batch: usize,
    emb: Vec<f64>,
    h_pre: Vec<f64>,
    h: Vec<f64>,
    x: Act,
    z0: Act,
    s0: Act,
    z1: Act,
    s1: Act,
    z2: Act,
    s2: Act,
    z3: Act,
    cat1: Act,
    z4: Act,
    cat2: Act,
    z5: Act,
    s5: Act,
}

fn forward(params: &DenoiserParams, xs: &[SymMatrix], ks: &[usize]) -> Result<(Vec<f64>, Cache)> {
    let arch = params.architecture();
    let batch = xs.len();
    if batch == 0 || ks.len() != batch {
        return Err(Error::dim(format!("{} inputs but {} steps", batch, ks.len())));
    }
    let l = xs[0].dim();
    if l % 4 != 0 || l == 0 {
        return Err(Error::dim(format!("matrix size {l} is not divisible by 4")));
    }
    if let Some(x) = xs.iter().find(|x| x.dim() != l) {
        return Err(Error::dim(format!("batch mixes {l}x{l} and {0}x{0} inputs", x.dim())));
    }

    // Step embedding, stored (d_emb, B).
    let d = arch.d_emb;
    let mut emb = vec![0.0; d * batch];
    for (bi, &k) in ks.iter().enumerate() {
        for (j, v) in sinusoidal_embed(k, d)?.into_iter().enumerate() {
            emb[j * batch + bi] = v;
        }
    }
    let p = |s: usize| params.slice(s);
    let h_pre = dense(p(slot::EMB), p(slot::EMB + 1), &emb, d, batch);
    let h: Vec<f64> = h_pre.iter().map(|&v| silu(v)).collect();
    let t_stem = dense(p(slot::EMB_STEM), p(slot::EMB_STEM + 1), &h, arch.c1, batch);
    let t_enc1 = dense(p(slot::EMB_ENC1), p(slot::EMB_ENC1 + 1), &h, arch.c1, batch);
    let t_enc2 = dense(p(slot::EMB_ENC2), p(slot::EMB_ENC2 + 1), &h, arch.c1, batch);

    let mut x = Act::zeros(1, batch, l, l);
    for (bi, m) in xs.iter().enumerate() {
        x.data[bi * l * l..][..l * l].copy_from_slice(m.as_slice());
    }

    let mut z0 = conv_forward(&x, p(slot::STEM), p(slot::STEM + 1), 1);
    add_step_bias(&mut z0, &t_stem);
    let s0 = silu_act(&z0);
    let mut z1 = conv_forward(&s0, p(slot::ENC1), p(slot::ENC1 + 1), 2);
    add_step_bias(&mut z1, &t_enc1);
    let s1 = silu_act(&z1);
    let mut z2 = conv_forward(&s1, p(slot::ENC2), p(slot::ENC2 + 1), 2);
    add_step_bias(&mut z2, &t_enc2);
    let s2 = silu_act(&z2);
    let z3 = conv_forward(&s2, p(slot::MID), p(slot::MID + 1), 1);
    let s3 = silu_act(&z3);
    let cat1 = Act::concat(&upsample(&s3), &s1);
    let z4 = conv_forward(&cat1, p(slot::DEC1), p(slot::DEC1 + 1), 1);
    let s4 = silu_act(&z4);
    let cat2 = Act::concat(&upsample(&s4), &s0);
    let z5 = conv_forward(&cat2, p(slot::DEC2), p(slot::DEC2 + 1), 1);
    let s5 = silu_act(&z5);
    let y = conv_forward(&s5, p(slot::HEAD), p(slot::HEAD + 1), 1);

    if y.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            message: "network produced non-finite activations".into(),
            residual: f64::NAN,
        });
    }
    let mut out = y.data;
    for m in out.chunks_exact_mut(l * l) {
        symmetrize_in_place(m, l);
    }
    Ok((
        out,
        Cache { batch, emb, h_pre, h, x, z0, s0, z1, s1, z2, s2, z3, cat1, z4, cat2, z5, s5 },
    ))
}

fn symmetrize_in_place(m: &mut [f64], l: usize) {
    for i in 0..l {
        for j in (i + 1)..l {
            let v = 0.5 * (m[i * l + j] + m[j * l + i]);
            m[i * l + j] = v;
            m[j * l + i] = v;
        }
    }
}

/// Gradient of the parameters given `dout`, the loss gradient w.r.t. the symmetrized outputs.
fn backward(params: &DenoiserParams, cache: &Cache, mut dout: Vec<f64>, l: usize) -> Vec<f64> {
    let arch = params.architecture();
    let batch = cache.batch;
    let mut g = vec![0.0; params.param_count()];
    let p = |s: usize| params.slice(s);
    // Both weight and bias of a layer: they are adjacent in the flat buffer.
    let span = |s: usize| params.range(s).start..params.range(s + 1).end;

    // The symmetrization layer is self-adjoint.
    for m in dout.chunks_exact_mut(l * l) {
        symmetrize_in_place(m, l);
    }
    let dy = Act { c: 1, b: batch, h: l, w: l, data: dout };

    let ds5 = conv_backward(&cache.s5, p(slot::HEAD), &dy, 1, &mut g[span(slot::HEAD)], true).unwrap();
    let dz5 = silu_back(&cache.z5, &ds5);
    let dcat2 = conv_backward(&cache.cat2, p(slot::DEC2), &dz5, 1, &mut g[span(slot::DEC2)], true).unwrap();
    let (du4, mut ds0) = dcat2.split(arch.c2);
    let ds4 = upsample_back(&du4);
    let dz4 = silu_back(&cache.z4, &ds4);
    let dcat1 = conv_backward(&cache.cat1, p(slot::DEC1), &dz4, 1, &mut g[span(slot::DEC1)], true).unwrap();
    let (du3, mut ds1) = dcat1.split(arch.c3);
    let ds3 = upsample_back(&du3);
    let dz3 = silu_back(&cache.z3, &ds3);
    let ds2 = conv_backward(&cache.s2, p(slot::MID), &dz3, 1, &mut g[span(slot::MID)], true).unwrap();
    let dz2 = silu_back(&cache.z2, &ds2);
    let dt_enc2 = step_bias_grad(&dz2);
    let ds1_enc = conv_backward(&cache.s1, p(slot::ENC2), &dz2, 2, &mut g[span(slot::ENC2)], true).unwrap();
    ds1.data.iter_mut().zip(&ds1_enc.data).for_each(|(a, b)| *a += b);
    let dz1 = silu_back(&cache.z1, &ds1);
    let dt_enc1 = step_bias_grad(&dz1);
    let ds0_enc = conv_backward(&cache.s0, p(slot::ENC1), &dz1, 2, &mut g[span(slot::ENC1)], true).unwrap();
    ds0.data.iter_mut().zip(&ds0_enc.data).for_each(|(a, b)| *a += b);
    let dz0 = silu_back(&cache.z0, &ds0);
    let dt_stem = step_bias_grad(&dz0);
    conv_backward(&cache.x, p(slot::STEM), &dz0, 1, &mut g[span(slot::STEM)], false);

    let mut dh = vec![0.0; arch.c1 * batch];
    for (s, dt) in [(slot::EMB_STEM, &dt_stem), (slot::EMB_ENC1, &dt_enc1), (slot::EMB_ENC2, &dt_enc2)] {
        let dx = dense_back(p(s), &cache.h, dt, arch.c1, batch, &mut g[span(s)]);
        dh.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    }
    let dh_pre: Vec<f64> = dh.iter().zip(&cache.h_pre).map(|(&d, &z)| d * silu_grad(z)).collect();
    debug_assert_eq!(cache.h.len(), dh_pre.len());
    dense_back(p(slot::EMB), &cache.emb, &dh_pre, arch.d_emb, batch, &mut g[span(slot::EMB)]);
    g
}

/// Predicted noise for each `(x, k)` pair.
pub fn predict_batch(params: &DenoiserParams, xs: &[SymMatrix], ks: &[usize]) -> Result<Vec<SymMatrix>> {
    let (out, _) = forward(params, xs, ks)?;
    let l = xs[0].dim();
    out.chunks_exact(l * l)
        .map(|m| Ok(SymMatrix::from_symmetric_unchecked(Matrix::from_vec(l, l, m.to_vec())?)))
        .collect()
}

/// `mean_b ‖ε_θ(x_b, k_b) − target_b‖_F²` and its gradient with respect to every parameter.
pub fn loss_and_gradient(
    params: &DenoiserParams,
    xs: &[SymMatrix],
    ks: &[usize],
    targets: &[SymMatrix],
) -> Result<(f64, Vec<f64>)> {
    if targets.len() != xs.len() {
        return Err(Error::dim(format!("{} inputs but {} targets", xs.len(), targets.len())));
    }
    let (out, cache) = forward(params, xs, ks)?;
    let l = xs[0].dim();
    let scale = 1.0 / xs.len() as f64;
    let mut loss = 0.0;
    let mut dout = vec![0.0; out.len()];
    for (bi, t) in targets.iter().enumerate() {
        if t.dim() != l {
            return Err(Error::dim("target size differs from input size"));
        }
        let o = &out[bi * l * l..][..l * l];
        let d = &mut dout[bi * l * l..][..l * l];
        for ((dv, &ov), &tv) in d.iter_mut().zip(o).zip(t.as_slice()) {
            let r = ov - tv;
            loss += r * r;
            *dv = 2.0 * r * scale;
        }
    }
    let grad = backward(params, &cache, dout, l);
    Ok((loss * scale, grad))
}

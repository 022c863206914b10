//! Raw forward/backward kernels. Storage is `T`; every inner product and
//! reduction accumulates in `f64`. Gradients flow as `f64` buffers.

use crate::error::{Error, Result};
use crate::mask::IndexMask;

use super::{Element, Shape, Tensor};

/// `c (m×n, contiguous row-major) = beta·c + a·b`, with strided `a` (m×k)
/// and `b` (k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output columns `ow` for which `ow * stride + kw - pad` lands in `0..width`.
#[inline]
fn valid_cols(wo: usize, width: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    // lo: smallest ow with ow*s + kw >= pad
    let lo = if kw >= pad { 0 } else { (pad - kw).div_ceil(stride) };
    // hi: one past the largest ow with ow*s + kw - pad <= width - 1
    let limit = width + pad;
    let hi = if kw >= limit {
        0
    } else {
        ((limit - kw - 1) / stride + 1).min(wo)
    };
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &mut col[((ci * g.k + kh) * g.k + kw) * p..][..p];
                let (lo, hi) = valid_cols(g.wo, g.w, kw, g.stride, g.pad);
                for oh in 0..g.ho {
                    let out = &mut row[oh * g.wo..(oh + 1) * g.wo];
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    for ow in lo..hi {
                        out[ow] = src[ow * g.stride + kw - g.pad].widen();
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let p = g.positions();
    for ci in 0..g.cin {
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = &col[((ci * g.k + kh) * g.k + kw) * p..][..p];
                let (lo, hi) = valid_cols(g.wo, g.w, kw, g.stride, g.pad);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let src = &row[oh * g.wo..(oh + 1) * g.wo];
                    for ow in lo..hi {
                        dst[ow * g.stride + kw - g.pad] += src[ow];
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Element>(
    op: &str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Result<ConvGeom> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.h != ws.w || ws.h.is_multiple_of(2) {
        return Err(Error::config(format!(
            "{op}: kernel must be square with odd size, weight shape {ws}"
        )));
    }
    if stride == 0 {
        return Err(Error::config(format!("{op}: stride must be positive")));
    }
    let expected_cin = if depthwise { ws.n } else { ws.c };
    if depthwise && ws.c != 1 {
        return Err(Error::config(format!(
            "{op}: depthwise weight must be (C, 1, k, k), got {ws}"
        )));
    }
    if xs.c != expected_cin {
        return Err(Error::config(format!(
            "{op}: input shape {xs} has {} channels but weight shape {ws} expects {expected_cin}",
            xs.c
        )));
    }
    let k = ws.h;
    let ho = out_dim(xs.h, k, stride, pad);
    let wo = out_dim(xs.w, k, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvGeom {
            cin: xs.c,
            h: xs.h,
            w: xs.w,
            k,
            stride,
            pad,
            ho,
            wo,
        }),
        _ => Err(Error::config(format!(
            "{op}: padded input {xs} (padding {pad}) smaller than kernel {k}"
        ))),
    }
}

fn check_bias<T: Element>(op: &str, b: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != Shape::new(1, cout, 1, 1) {
            return Err(Error::config(format!(
                "{op}: bias shape {} does not match (1, {cout}, 1, 1)",
                b.shape()
            )));
        }
    }
    Ok(())
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom("conv2d", x, w, stride, pad, false)?;
    let cout = w.shape().n;
    check_bias("conv2d", b, cout)?;
    let n = x.shape().n;
    let rows = g.col_rows();
    let p = g.positions();
    let wmat = w.to_f64_vec();
    let bias = b.map(|b| b.to_f64_vec());
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { rows * p }];
    let mut acc = vec![0.0; cout * p];
    let mut out = Vec::with_capacity(n * cout * p);
    let in_len = x.shape().sample();
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let col_ref: Vec<f64>;
        let col_slice: &[f64] = if g.is_pointwise() {
            col_ref = xs.iter().map(|v| v.widen()).collect();
            &col_ref
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        match &bias {
            Some(bias) => {
                for (co, chunk) in acc.chunks_mut(p).enumerate() {
                    chunk.fill(bias[co]);
                }
                gemm(cout, rows, p, &wmat, rows, 1, col_slice, p, 1, 1.0, &mut acc);
            }
            None => gemm(cout, rows, p, &wmat, rows, 1, col_slice, p, 1, 0.0, &mut acc),
        }
        out.extend(acc.iter().map(|&v| T::narrow(v)));
    }
    Tensor::new(Shape::new(n, cout, g.ho, g.wo), out)
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    gy: &[f64],
) -> Result<ConvGrads> {
    let g = conv_geom("conv2d", x, w, stride, pad, false)?;
    let cout = w.shape().n;
    let n = x.shape().n;
    let rows = g.col_rows();
    let p = g.positions();
    let wmat = w.to_f64_vec();
    let in_len = x.shape().sample();
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; cout * rows];
    let mut gb = vec![0.0; cout];
    let mut col = vec![0.0; rows * p];
    let mut gcol = vec![0.0; rows * p];
    for s in 0..n {
        let xs = &x.data()[s * in_len..(s + 1) * in_len];
        let gys = &gy[s * cout * p..(s + 1) * cout * p];
        if g.is_pointwise() {
            for (dst, v) in col.iter_mut().zip(xs) {
                *dst = v.widen();
            }
        } else {
            im2col(xs, &g, &mut col);
        }
        // dW += dY · colᵀ
        gemm(cout, p, rows, gys, p, 1, &col, 1, p, 1.0, &mut gw);
        // dcol = Wᵀ · dY
        let gxs = &mut gx[s * in_len..(s + 1) * in_len];
        if g.is_pointwise() {
            gemm(rows, cout, p, &wmat, 1, rows, gys, p, 1, 0.0, gxs);
        } else {
            gemm(rows, cout, p, &wmat, 1, rows, gys, p, 1, 0.0, &mut gcol);
            col2im(&gcol, &g, gxs);
        }
        for (co, row) in gys.chunks(p).enumerate() {
            gb[co] += sum_f64(row);
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

pub(crate) fn depthwise_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom("depthwise_conv2d", x, w, stride, pad, true)?;
    let n = x.shape().n;
    let k = g.k;
    let mut out = Vec::with_capacity(n * g.cin * g.positions());
    let mut acc = vec![0.0f64; g.wo];
    for s in 0..n {
        for c in 0..g.cin {
            let plane = &x.data()[(s * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let kern = &w.data()[c * k * k..(c + 1) * k * k];
            for oh in 0..g.ho {
                acc.fill(0.0);
                for kh in 0..k {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for kw in 0..k {
                        let wv = kern[kh * k + kw].widen();
                        let (lo, hi) = valid_cols(g.wo, g.w, kw, g.stride, g.pad);
                        if lo >= hi {
                            continue;
                        }
                        if g.stride == 1 {
                            let off = kw as isize - g.pad as isize;
                            let src = &src[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            for (a, v) in acc[lo..hi].iter_mut().zip(src) {
                                *a += wv * v.widen();
                            }
                        } else {
                            for ow in lo..hi {
                                acc[ow] += wv * src[ow * g.stride + kw - g.pad].widen();
                            }
                        }
                    }
                }
                out.extend(acc.iter().map(|&v| T::narrow(v)));
            }
        }
    }
    Tensor::new(Shape::new(n, g.cin, g.ho, g.wo), out)
}

pub(crate) fn depthwise_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    gy: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = conv_geom("depthwise_conv2d", x, w, stride, pad, true)?;
    let n = x.shape().n;
    let k = g.k;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut xrow = vec![0.0f64; g.w];
    for s in 0..n {
        for c in 0..g.cin {
            let base = (s * g.cin + c) * g.h * g.w;
            let plane = &x.data()[base..base + g.h * g.w];
            let gplane = &mut gx[base..base + g.h * g.w];
            let gyp = &gy[(s * g.cin + c) * g.positions()..][..g.positions()];
            let kern = &w.data()[c * k * k..(c + 1) * k * k];
            let gkern = &mut gw[c * k * k..(c + 1) * k * k];
            for oh in 0..g.ho {
                let gyr = &gyp[oh * g.wo..(oh + 1) * g.wo];
                for kh in 0..k {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let ih = ih as usize;
                    for (dst, v) in xrow.iter_mut().zip(&plane[ih * g.w..(ih + 1) * g.w]) {
                        *dst = v.widen();
                    }
                    let grow = &mut gplane[ih * g.w..(ih + 1) * g.w];
                    for kw in 0..k {
                        let wv = kern[kh * k + kw].widen();
                        let (lo, hi) = valid_cols(g.wo, g.w, kw, g.stride, g.pad);
                        if lo >= hi {
                            continue;
                        }
                        if g.stride == 1 {
                            let start = lo + kw - g.pad;
                            let len = hi - lo;
                            gkern[kh * k + kw] += dot_f64(&gyr[lo..hi], &xrow[start..start + len]);
                            for (d, gv) in grow[start..start + len].iter_mut().zip(&gyr[lo..hi]) {
                                *d += wv * gv;
                            }
                        } else {
                            let mut acc = 0.0;
                            for ow in lo..hi {
                                let iw = ow * g.stride + kw - g.pad;
                                acc += gyr[ow] * xrow[iw];
                                grow[iw] += wv * gyr[ow];
                            }
                            gkern[kh * k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Max pooling over `k × k` windows. Padded positions never win. Returns the
/// pooled tensor and, per output element, the flat in-plane index of the
/// first maximum in row-major scan order.
pub(crate) fn maxpool_forward<T: Element>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    if k == 0 || stride == 0 {
        return Err(Error::config(format!(
            "maxpool2d: kernel ({k}) and stride ({stride}) must be at least 1"
        )));
    }
    if pad >= k {
        return Err(Error::config(format!(
            "maxpool2d: padding {pad} must be smaller than kernel {k}"
        )));
    }
    let s = x.shape();
    let (ho, wo) = match (out_dim(s.h, k, stride, pad), out_dim(s.w, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::config(format!(
                "maxpool2d: input {s} smaller than window {k}"
            )))
        }
    };
    let planes = s.n * s.c;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let plane = &x.data()[pl * s.plane()..(pl + 1) * s.plane()];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for kh in 0..k {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih as usize >= s.h {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw as usize >= s.w {
                            continue;
                        }
                        let idx = ih as usize * s.w + iw as usize;
                        let v = plane[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("pool window covers at least one input");
                out.push(v);
                arg.push(idx as u32);
            }
        }
    }
    Ok((Tensor::new(Shape::new(s.n, s.c, ho, wo), out)?, arg))
}

pub(crate) fn maxpool_backward(input: Shape, out_plane: usize, argmax: &[u32], gy: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input.numel()];
    for (pl, (args, grads)) in argmax.chunks(out_plane).zip(gy.chunks(out_plane)).enumerate() {
        let base = pl * input.plane();
        for (&a, &g) in args.iter().zip(grads) {
            gx[base + a as usize] += g;
        }
    }
    gx
}

pub(crate) fn upsample_forward<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::config("upsample factor must be at least 1"));
    }
    let s = x.shape();
    let (h2, w2) = (s.h * factor, s.w * factor);
    let mut out = Vec::with_capacity(s.n * s.c * h2 * w2);
    let mut row = Vec::with_capacity(w2);
    for pl in 0..s.n * s.c {
        let plane = &x.data()[pl * s.plane()..(pl + 1) * s.plane()];
        for y in 0..s.h {
            row.clear();
            for &v in &plane[y * s.w..(y + 1) * s.w] {
                row.extend(std::iter::repeat_n(v, factor));
            }
            for _ in 0..factor {
                out.extend_from_slice(&row);
            }
        }
    }
    Tensor::new(Shape::new(s.n, s.c, h2, w2), out)
}

pub(crate) fn upsample_backward(input: Shape, factor: usize, gy: &[f64]) -> Vec<f64> {
    let w2 = input.w * factor;
    let mut gx = vec![0.0; input.numel()];
    let out_plane = input.plane() * factor * factor;
    for pl in 0..input.n * input.c {
        let src = &gy[pl * out_plane..(pl + 1) * out_plane];
        let dst = &mut gx[pl * input.plane()..(pl + 1) * input.plane()];
        for y2 in 0..input.h * factor {
            let row = &src[y2 * w2..(y2 + 1) * w2];
            let drow = &mut dst[(y2 / factor) * input.w..(y2 / factor + 1) * input.w];
            for (x, chunk) in row.chunks(factor).enumerate() {
                drow[x] += chunk.iter().sum::<f64>();
            }
        }
    }
    gx
}

pub(crate) fn concat_forward<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("concat_channels of an empty list"))?
        .shape();
    for (i, p) in parts.iter().enumerate() {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::config(format!(
                "concat_channels: part {i} has shape {s}, expected ({}, *, {}, {})",
                first.n, first.h, first.w
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let mut out = Vec::with_capacity(first.n * c * first.plane());
    for n in 0..first.n {
        for p in parts {
            let len = p.shape().sample();
            out.extend_from_slice(&p.data()[n * len..(n + 1) * len]);
        }
    }
    Tensor::new(Shape::new(first.n, c, first.h, first.w), out)
}

/// Splits a concatenated gradient back into per-part buffers.
pub(crate) fn concat_backward(parts: &[Shape], gy: &[f64]) -> Vec<Vec<f64>> {
    let n = parts.first().map_or(0, |s| s.n);
    let total: usize = parts.iter().map(|s| s.sample()).sum();
    let mut grads: Vec<Vec<f64>> = parts.iter().map(|s| Vec::with_capacity(s.numel())).collect();
    for b in 0..n {
        let mut off = b * total;
        for (g, s) in grads.iter_mut().zip(parts) {
            g.extend_from_slice(&gy[off..off + s.sample()]);
            off += s.sample();
        }
    }
    grads
}

pub(crate) fn softmax_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c == 0 {
        return Err(Error::config("softmax over zero channels"));
    }
    let plane = s.plane();
    let mut out = vec![T::zero(); s.numel()];
    let mut buf = vec![0.0f64; s.c];
    for n in 0..s.n {
        let base = n * s.sample();
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = x.data()[base + c * plane + p].widen();
                max = max.max(*b);
            }
            let mut sum = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - max).exp();
                sum += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                out[base + c * plane + p] = T::narrow(b / sum);
            }
        }
    }
    Tensor::new(s, out)
}

pub(crate) fn softmax_backward<T: Element>(y: &Tensor<T>, gy: &[f64]) -> Vec<f64> {
    let s = y.shape();
    let plane = s.plane();
    let mut gx = vec![0.0; s.numel()];
    for n in 0..s.n {
        let base = n * s.sample();
        for p in 0..plane {
            let mut dot = 0.0;
            for c in 0..s.c {
                let i = base + c * plane + p;
                dot += gy[i] * y.data()[i].widen();
            }
            for c in 0..s.c {
                let i = base + c * plane + p;
                gx[i] = y.data()[i].widen() * (gy[i] - dot);
            }
        }
    }
    gx
}

/// Cached state of a cross-entropy evaluation for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct CrossEntropyCache {
    pub probs: Vec<f64>,
    pub targets: Vec<u8>,
    pub pixel_weights: Vec<f64>,
    pub weight_sum: f64,
}

pub(crate) fn cross_entropy_forward<T: Element>(
    logits: &Tensor<T>,
    targets: &[IndexMask],
    class_weights: Option<&[f64]>,
) -> Result<(f64, CrossEntropyCache)> {
    let s = logits.shape();
    if targets.len() != s.n {
        return Err(Error::data(format!(
            "cross_entropy: {} target masks for a batch of {}",
            targets.len(),
            s.n
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != s.c {
            return Err(Error::config(format!(
                "cross_entropy: {} class weights for {} classes",
                w.len(),
                s.c
            )));
        }
    }
    let plane = s.plane();
    let mut flat_targets = Vec::with_capacity(s.n * plane);
    for (n, m) in targets.iter().enumerate() {
        if (m.height(), m.width()) != (s.h, s.w) {
            return Err(Error::data(format!(
                "cross_entropy: target {n} is {}x{}, logits are {}x{}",
                m.height(),
                m.width(),
                s.h,
                s.w
            )));
        }
        if let Some(i) = m.data().iter().position(|&v| v as usize >= s.c) {
            return Err(Error::data(format!(
                "cross_entropy: target index {} at (sample {n}, row {}, col {}) is not below {} classes",
                m.data()[i],
                i / s.w,
                i % s.w,
                s.c
            )));
        }
        flat_targets.extend_from_slice(m.data());
    }

    let mut probs = vec![0.0f64; s.numel()];
    let mut pixel_weights = Vec::with_capacity(s.n * plane);
    let mut total = 0.0f64;
    let mut weight_sum = 0.0f64;
    let mut buf = vec![0.0f64; s.c];
    for n in 0..s.n {
        let base = n * s.sample();
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = logits.data()[base + c * plane + p].widen();
                max = max.max(*b);
            }
            let mut sum = 0.0;
            for b in &buf {
                sum += (b - max).exp();
            }
            let log_sum = sum.ln();
            for (c, b) in buf.iter().enumerate() {
                probs[base + c * plane + p] = ((b - max) - log_sum).exp();
            }
            let t = flat_targets[n * plane + p] as usize;
            let wt = class_weights.map_or(1.0, |w| w[t]);
            let nll = -((buf[t] - max) - log_sum);
            total += wt * nll;
            weight_sum += wt;
            pixel_weights.push(wt);
        }
    }
    if weight_sum <= 0.0 {
        return Err(Error::numeric(
            "cross_entropy: total class weight of the target pixels is zero",
        ));
    }
    let loss = total / weight_sum;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("cross_entropy: non-finite loss {loss}")));
    }
    Ok((
        loss,
        CrossEntropyCache {
            probs,
            targets: flat_targets,
            pixel_weights,
            weight_sum,
        },
    ))
}

pub(crate) fn cross_entropy_backward(shape: Shape, cache: &CrossEntropyCache, gy: f64) -> Vec<f64> {
    let plane = shape.plane();
    let mut gx = cache.probs.clone();
    for n in 0..shape.n {
        let base = n * shape.sample();
        for p in 0..plane {
            let idx = n * plane + p;
            let scale = gy * cache.pixel_weights[idx] / cache.weight_sum;
            let t = cache.targets[idx] as usize;
            for c in 0..shape.c {
                let i = base + c * plane + p;
                let hot = if c == t { 1.0 } else { 0.0 };
                gx[i] = scale * (gx[i] - hot);
            }
        }
    }
    gx
}

/// Sum with eight independent lanes; fixed order, so deterministic.
pub(crate) fn sum_f64(v: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = v.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (l, x) in lanes.iter_mut().zip(c) {
            *l += x;
        }
    }
    let mut total = lanes.iter().sum::<f64>();
    for x in rest {
        total += x;
    }
    total
}

pub(crate) fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut total = lanes.iter().sum::<f64>();
    for (x, y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

//! Forward and backward kernels on plain [`Tensor`]s.
//!
//! The autograd tape in [`crate::autograd`] records which kernel produced a
//! value and calls the matching `*_backward` function during the reverse pass.
//! Every kernel here is deterministic and single-threaded.

use crate::error::{CodError, Result};
use crate::tensor::{Shape, Tensor};

/// How out-of-bounds taps of a convolution are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zeros,
    /// Wrap around the spatial axes (torus topology).
    Circular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            groups: 1,
            padding: Padding::Zeros,
        }
    }
}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// `C = A * B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched by the kernel lies inside the slices, which
    // the asserts above check for the largest offsets of each operand.
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
            rsc as isize,
            csc as isize,
        );
    }
}

#[inline]
fn tap_index(i: isize, len: usize, padding: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else {
        match padding {
            Padding::Zeros => None,
            Padding::Circular => Some(i.rem_euclid(len as isize) as usize),
        }
    }
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: Shape, weight: Shape, geom: &ConvGeom) -> Result<ConvDims> {
    let [b, cin, h, w] = x;
    let [cout, cin_g, kh, kw] = weight;
    if kh != kw {
        return Err(CodError::Shape(format!("non-square kernel {kh}x{kw}")));
    }
    if geom.groups == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 {
        return Err(CodError::Shape(format!(
            "{} groups do not divide {cin} -> {cout} channels",
            geom.groups
        )));
    }
    if cin / geom.groups != cin_g {
        return Err(CodError::Shape(format!(
            "conv weight {weight:?} expects {} input channels, input has {cin}",
            cin_g * geom.groups
        )));
    }
    if geom.padding == Padding::Circular && (geom.pad > h || geom.pad > w) {
        return Err(CodError::Shape("circular padding wider than the input".into()));
    }
    let oh = conv_out_len(h, kh, geom.stride, geom.pad);
    let ow = conv_out_len(w, kw, geom.stride, geom.pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(CodError::Shape(format!(
            "input {h}x{w} smaller than kernel {kh} with padding {}",
            geom.pad
        )));
    };
    Ok(ConvDims {
        b,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / geom.groups,
        k: kh,
        oh,
        ow,
    })
}

fn im2col(x: &[f64], d: &ConvDims, geom: &ConvGeom, cols: &mut [f64]) {
    let ohw = d.oh * d.ow;
    let k = d.k;
    for ci in 0..d.cin_g {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    let Some(iy) = tap_index(iy, d.h, geom.padding) else {
                        dst[oy * d.ow..(oy + 1) * d.ow].fill(0.0);
                        continue;
                    };
                    for ox in 0..d.ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        dst[oy * d.ow + ox] = match tap_index(ix, d.w, geom.padding) {
                            Some(ix) => plane[iy * d.w + ix],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, geom: &ConvGeom, dx: &mut [f64]) {
    let ohw = d.oh * d.ow;
    let k = d.k;
    for ci in 0..d.cin_g {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    let Some(iy) = tap_index(iy, d.h, geom.padding) else {
                        continue;
                    };
                    for ox in 0..d.ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if let Some(ix) = tap_index(ix, d.w, geom.padding) {
                            plane[iy * d.w + ix] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `weight` is `(cout, cin/groups, k, k)`, `bias` is
/// `(1, cout, 1, 1)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: &ConvGeom) -> Result<Tensor> {
    let d = conv_dims(x.shape(), weight.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [1, d.cout, 1, 1] {
            return Err(CodError::Shape(format!("bias {:?} for {} outputs", b.shape(), d.cout)));
        }
    }
    let ohw = d.oh * d.ow;
    let kk = d.cin_g * d.k * d.k;
    let mut out = Tensor::zeros([d.b, d.cout, d.oh, d.ow]);
    let mut cols = vec![0.0; kk * ohw];
    let xs = x.data();
    let ws = weight.data();
    for bi in 0..d.b {
        for g in 0..geom.groups {
            let xin = &xs[(bi * d.cin + g * d.cin_g) * d.h * d.w..];
            im2col(xin, &d, geom, &mut cols);
            let wg = &ws[g * d.cout_g * kk..(g + 1) * d.cout_g * kk];
            let start = (bi * d.cout + g * d.cout_g) * ohw;
            let og = &mut out.data_mut()[start..start + d.cout_g * ohw];
            gemm(d.cout_g, kk, ohw, wg, (kk, 1), &cols, (ohw, 1), 0.0, og, (ohw, 1));
        }
    }
    if let Some(b) = bias {
        for bi in 0..d.b {
            for co in 0..d.cout {
                let v = b.data()[co];
                out.plane_mut(bi, co).iter_mut().for_each(|o| *o += v);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    geom: &ConvGeom,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let d = conv_dims(x.shape(), weight.shape(), geom).expect("shapes validated in forward");
    let ohw = d.oh * d.ow;
    let kk = d.cin_g * d.k * d.k;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut cols = vec![0.0; kk * ohw];
    let mut dcols = vec![0.0; kk * ohw];
    let xs = x.data();
    let ws = weight.data();
    let gs = grad_out.data();
    for bi in 0..d.b {
        for g in 0..geom.groups {
            let xoff = (bi * d.cin + g * d.cin_g) * d.h * d.w;
            im2col(&xs[xoff..], &d, geom, &mut cols);
            let gstart = (bi * d.cout + g * d.cout_g) * ohw;
            let go = &gs[gstart..gstart + d.cout_g * ohw];
            let dwg = &mut dw.data_mut()[g * d.cout_g * kk..(g + 1) * d.cout_g * kk];
            gemm(d.cout_g, ohw, kk, go, (ohw, 1), &cols, (1, ohw), 1.0, dwg, (kk, 1));
            let wg = &ws[g * d.cout_g * kk..(g + 1) * d.cout_g * kk];
            gemm(kk, d.cout_g, ohw, wg, (1, kk), go, (ohw, 1), 0.0, &mut dcols, (ohw, 1));
            col2im(&dcols, &d, geom, &mut dx.data_mut()[xoff..xoff + d.cin_g * d.h * d.w]);
        }
    }
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros([1, d.cout, 1, 1]);
        for bi in 0..d.b {
            for co in 0..d.cout {
                db.data_mut()[co] += grad_out.plane(bi, co).iter().sum::<f64>();
            }
        }
        db
    });
    (dx, dw, db)
}

/// Source taps for one axis of an `align_corners = false` bilinear resize:
/// `(i0, i1, lambda)` per output index.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (`align_corners = false`).
pub fn resize_bilinear(x: &Tensor, (oh, ow): (usize, usize)) -> Result<Tensor> {
    let [b, c, h, w] = x.shape();
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        return Err(CodError::Shape(format!("resize {h}x{w} -> {oh}x{ow}")));
    }
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let a = src[y0 * w + x0];
                    let bb = src[y0 * w + x1];
                    let cc = src[y1 * w + x0];
                    let dd = src[y1 * w + x1];
                    let top = a + (bb - a) * lx;
                    let bottom = cc + (dd - cc) * lx;
                    dst[oy * ow + ox] = top + (bottom - top) * ly;
                }
            }
        }
    }
    Ok(out)
}

pub fn resize_bilinear_backward(in_shape: Shape, grad_out: &Tensor) -> Tensor {
    let [b, c, h, w] = in_shape;
    let (oh, ow) = grad_out.hw();
    if (oh, ow) == (h, w) {
        return grad_out.clone();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = Tensor::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.plane(bi, ci);
            let d = dx.plane_mut(bi, ci);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let v = g[oy * ow + ox];
                    d[y0 * w + x0] += v * (1.0 - lx) * (1.0 - ly);
                    d[y0 * w + x1] += v * lx * (1.0 - ly);
                    d[y1 * w + x0] += v * (1.0 - lx) * ly;
                    d[y1 * w + x1] += v * lx * ly;
                }
            }
        }
    }
    dx
}

/// Half-open window `[start, end)` of adaptive pooling bin `i`:
/// `floor(i * len / bins) .. ceil((i + 1) * len / bins)`.
#[inline]
pub fn adaptive_window(i: usize, len: usize, bins: usize) -> (usize, usize) {
    (i * len / bins, ((i + 1) * len).div_ceil(bins))
}

fn check_pool(x: &Tensor, (oh, ow): (usize, usize)) -> Result<()> {
    let (h, w) = x.hw();
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(CodError::Shape(format!(
            "adaptive pooling {h}x{w} -> {oh}x{ow} (target must be non-empty and not larger)"
        )));
    }
    Ok(())
}

pub fn adaptive_avg_pool(x: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    check_pool(x, out_hw)?;
    let [b, c, h, w] = x.shape();
    let (oh, ow) = out_hw;
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for oy in 0..oh {
                let (y0, y1) = adaptive_window(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_window(ox, w, ow);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += src[y * w + xx];
                        }
                    }
                    dst[oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    Ok(out)
}

pub fn adaptive_avg_pool_backward(in_shape: Shape, grad_out: &Tensor) -> Tensor {
    let [b, c, h, w] = in_shape;
    let (oh, ow) = grad_out.hw();
    let mut dx = Tensor::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.plane(bi, ci);
            let d = dx.plane_mut(bi, ci);
            for oy in 0..oh {
                let (y0, y1) = adaptive_window(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_window(ox, w, ow);
                    let v = g[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            d[y * w + xx] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adaptive max pooling; also returns the flat input offset of each maximum
/// (first occurrence in row-major order on ties).
pub fn adaptive_max_pool(x: &Tensor, out_hw: (usize, usize)) -> Result<(Tensor, Vec<usize>)> {
    check_pool(x, out_hw)?;
    let [b, c, h, w] = x.shape();
    let (oh, ow) = out_hw;
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ci in 0..c {
            let base = x.offset(bi, ci, 0, 0);
            let src = x.plane(bi, ci);
            for oy in 0..oh {
                let (y0, y1) = adaptive_window(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_window(ox, w, ow);
                    let mut best = f64::NEG_INFINITY;
                    let mut at = y0 * w + x0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let v = src[y * w + xx];
                            if v > best {
                                best = v;
                                at = y * w + xx;
                            }
                        }
                    }
                    out.set(bi, ci, oy, ox, best);
                    arg.push(base + at);
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn adaptive_max_pool_backward(in_shape: Shape, argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    for (&at, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[at] += g;
    }
    dx
}

/// Per-sample statistics of a normalisation: `(mean, rstd)` per group.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Group normalisation over `(C / groups, H, W)` with per-channel affine
/// parameters of shape `(1, C, 1, 1)`.
pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<(Tensor, NormStats)> {
    let [b, c, h, w] = x.shape();
    if groups == 0 || c % groups != 0 {
        return Err(CodError::Shape(format!("{groups} norm groups for {c} channels")));
    }
    if gamma.shape() != [1, c, 1, 1] || beta.shape() != [1, c, 1, 1] {
        return Err(CodError::Shape(format!(
            "norm affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let cg = c / groups;
    let n = cg * h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: Vec::with_capacity(b * groups),
        rstd: Vec::with_capacity(b * groups),
    };
    for bi in 0..b {
        for g in 0..groups {
            let start = (bi * c + g * cg) * h * w;
            let seg = &x.data()[start..start + n];
            let mean = seg.iter().sum::<f64>() / n as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            stats.mean.push(mean);
            stats.rstd.push(rstd);
            for j in 0..cg {
                let ch = g * cg + j;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let plane = start + j * h * w;
                for i in 0..h * w {
                    out.data_mut()[plane + i] = (x.data()[plane + i] - mean) * rstd * ga + be;
                }
            }
        }
    }
    Ok((out, stats))
}

pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    stats: &NormStats,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, c, h, w] = x.shape();
    let cg = c / groups;
    let hw = h * w;
    let n = (cg * hw) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor::zeros([1, c, 1, 1]);
    for bi in 0..b {
        for g in 0..groups {
            let (mean, rstd) = (stats.mean[bi * groups + g], stats.rstd[bi * groups + g]);
            let start = (bi * c + g * cg) * hw;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for j in 0..cg {
                let ch = g * cg + j;
                let ga = gamma.data()[ch];
                for i in 0..hw {
                    let o = start + j * hw + i;
                    let xhat = (x.data()[o] - mean) * rstd;
                    let dy = grad_out.data()[o];
                    dgamma.data_mut()[ch] += dy * xhat;
                    dbeta.data_mut()[ch] += dy;
                    sum_dxhat += dy * ga;
                    sum_dxhat_xhat += dy * ga * xhat;
                }
            }
            for j in 0..cg {
                let ga = gamma.data()[g * cg + j];
                for i in 0..hw {
                    let o = start + j * hw + i;
                    let xhat = (x.data()[o] - mean) * rstd;
                    let dxhat = grad_out.data()[o] * ga;
                    dx.data_mut()[o] = rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer normalisation across channels at every pixel, affine `(1, C, 1, 1)`.
pub fn channel_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, NormStats)> {
    let [b, c, h, w] = x.shape();
    if gamma.shape() != [1, c, 1, 1] || beta.shape() != [1, c, 1, 1] {
        return Err(CodError::Shape(format!(
            "layer norm affine {:?} for {c} channels",
            gamma.shape()
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: Vec::with_capacity(b * hw),
        rstd: Vec::with_capacity(b * hw),
    };
    let xs = x.data();
    for bi in 0..b {
        for p in 0..hw {
            let at = |ci: usize| (bi * c + ci) * hw + p;
            let mean = (0..c).map(|ci| xs[at(ci)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ci| (xs[at(ci)] - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for ci in 0..c {
                out.data_mut()[at(ci)] = (xs[at(ci)] - mean) * rstd * gamma.data()[ci] + beta.data()[ci];
            }
            stats.mean.push(mean);
            stats.rstd.push(rstd);
        }
    }
    Ok((out, stats))
}

pub fn channel_layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, c, h, w] = x.shape();
    let hw = h * w;
    let n = c as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor::zeros([1, c, 1, 1]);
    for bi in 0..b {
        for p in 0..hw {
            let (mean, rstd) = (stats.mean[bi * hw + p], stats.rstd[bi * hw + p]);
            let at = |ci: usize| (bi * c + ci) * hw + p;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for ci in 0..c {
                let xhat = (x.data()[at(ci)] - mean) * rstd;
                let dy = grad_out.data()[at(ci)];
                dgamma.data_mut()[ci] += dy * xhat;
                dbeta.data_mut()[ci] += dy;
                s1 += dy * gamma.data()[ci];
                s2 += dy * gamma.data()[ci] * xhat;
            }
            for ci in 0..c {
                let xhat = (x.data()[at(ci)] - mean) * rstd;
                let dxhat = grad_out.data()[at(ci)] * gamma.data()[ci];
                dx.data_mut()[at(ci)] = rstd / n * (n * dxhat - s1 - xhat * s2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax across the channel axis at every pixel.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        for p in 0..hw {
            let at = |ci: usize| (bi * c + ci) * hw + p;
            let m = (0..c).map(|ci| x.data()[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ci in 0..c {
                let e = (x.data()[at(ci)] - m).exp();
                out.data_mut()[at(ci)] = e;
                z += e;
            }
            for ci in 0..c {
                out.data_mut()[at(ci)] /= z;
            }
        }
    }
    out
}

pub fn softmax_channels_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let [b, c, h, w] = y.shape();
    let hw = h * w;
    let mut dx = Tensor::zeros(y.shape());
    for bi in 0..b {
        for p in 0..hw {
            let at = |ci: usize| (bi * c + ci) * hw + p;
            let dot: f64 = (0..c).map(|ci| grad_out.data()[at(ci)] * y.data()[at(ci)]).sum();
            for ci in 0..c {
                dx.data_mut()[at(ci)] = y.data()[at(ci)] * (grad_out.data()[at(ci)] - dot);
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_K * (v + 0.044715 * v * v * v)).tanh())
}

#[inline]
pub fn gelu_grad(v: f64) -> f64 {
    let u = GELU_K * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * v * v)
}

/// Output shape of a broadcasting binary op; each axis must match or be 1.
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(CodError::Shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

fn bstrides(s: Shape) -> [usize; 4] {
    let full = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if s[i] == 1 { 0 } else { full[i] };
    }
    st
}

/// Visit every output index of a broadcast between `a` and `b`, passing the
/// flat offsets into `a`, `b` and the output.
pub fn for_each_broadcast(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = bstrides(a);
    let sb = bstrides(b);
    let mut o = 0;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out[3] {
                    f(ba + i3 * sa[3], bb + i3 * sb[3], o);
                    o += 1;
                }
            }
        }
    }
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let mut out = Tensor::zeros(shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_broadcast(a.shape(), b.shape(), shape, |ia, ib, io| od[io] = f(ad[ia], bd[ib]));
    Ok(out)
}

/// Scaled dot-product attention with `heads` heads over channel-major maps.
///
/// `q` is `(B, C, H, W)`; `k` and `v` are `(B, C, h, w)`. Tokens are pixels
/// and head `i` owns channels `[i*C/heads, (i+1)*C/heads)`. Returns the output
/// and the attention probabilities `(B, heads, N, M)` flattened.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Vec<f64>)> {
    let [b, c, h, w] = q.shape();
    let [kb, kc, kh, kw] = k.shape();
    if k.shape() != v.shape() || kb != b || kc != c {
        return Err(CodError::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || c % heads != 0 {
        return Err(CodError::Shape(format!("{heads} heads for {c} channels")));
    }
    let (n, m, d) = (h * w, kh * kw, c / heads);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![0.0; b * heads * n * m];
    for bi in 0..b {
        for hd in 0..heads {
            let qo = (bi * c + hd * d) * n;
            let ko = (bi * c + hd * d) * m;
            let p = &mut probs[(bi * heads + hd) * n * m..(bi * heads + hd + 1) * n * m];
            gemm(n, d, m, &q.data()[qo..], (1, n), &k.data()[ko..], (m, 1), 0.0, p, (m, 1));
            for row in p.chunks_mut(m) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &s| a.max(s * scale));
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s * scale - mx).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            let od = &mut out.data_mut()[qo..];
            gemm(n, m, d, p, (m, 1), &v.data()[ko..], (1, m), 0.0, od, (1, n));
        }
    }
    Ok((out, probs))
}

pub fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [b, c, h, w] = q.shape();
    let [_, _, kh, kw] = k.shape();
    let (n, m, d) = (h * w, kh * kw, c / heads);
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![0.0; n * m];
    for bi in 0..b {
        for hd in 0..heads {
            let qo = (bi * c + hd * d) * n;
            let ko = (bi * c + hd * d) * m;
            let p = &probs[(bi * heads + hd) * n * m..(bi * heads + hd + 1) * n * m];
            let go = &grad_out.data()[qo..];
            // dV = P^T dO
            gemm(m, n, d, p, (1, m), go, (1, n), 1.0, &mut dv.data_mut()[ko..], (1, m));
            // dP = dO V^T
            gemm(n, d, m, go, (1, n), &v.data()[ko..], (m, 1), 0.0, &mut dp, (m, 1));
            for (drow, prow) in dp.chunks_mut(m).zip(p.chunks(m)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (ds, &pv) in drow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(n, m, d, &dp, (m, 1), &k.data()[ko..], (1, m), 1.0, &mut dq.data_mut()[qo..], (1, n));
            gemm(m, n, d, &dp, (1, m), &q.data()[qo..], (1, n), 1.0, &mut dk.data_mut()[ko..], (1, m));
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &Tensor, geom: &ConvGeom) -> Tensor {
        let [b, cin, h, w] = x.shape();
        let [cout, cin_g, k, _] = wt.shape();
        let oh = conv_out_len(h, k, geom.stride, geom.pad).unwrap();
        let ow = conv_out_len(w, k, geom.stride, geom.pad).unwrap();
        let cout_g = cout / geom.groups;
        Tensor::from_fn([b, cout, oh, ow], |bi, co, oy, ox| {
            let g = co / cout_g;
            let mut s = 0.0;
            for ci in 0..cin_g {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        let (iy, ix) = match geom.padding {
                            Padding::Zeros => {
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                (iy as usize, ix as usize)
                            }
                            Padding::Circular => (
                                iy.rem_euclid(h as isize) as usize,
                                ix.rem_euclid(w as isize) as usize,
                            ),
                        };
                        s += x.at(bi, g * cin_g + ci, iy, ix) * wt.at(co, ci, ky, kx);
                    }
                }
            }
            let _ = cin;
            s
        })
    }

    fn pseudo(shape: Shape, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (stride, pad, groups, padding) in [
            (1, 1, 1, Padding::Zeros),
            (2, 1, 1, Padding::Zeros),
            (1, 1, 1, Padding::Circular),
            (1, 1, 4, Padding::Zeros),
            (4, 3, 1, Padding::Zeros),
        ] {
            let geom = ConvGeom {
                stride,
                pad,
                groups,
                padding,
            };
            let k = if pad == 3 { 7 } else { 3 };
            let x = pseudo([2, 4, 9, 7], 1);
            let wt = pseudo([8, 4 / groups, k, k], 2);
            let got = conv2d(&x, &wt, None, &geom).unwrap();
            let want = naive_conv(&x, &wt, &geom);
            assert!(got.max_abs_diff(&want) < 1e-12, "{geom:?}");
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = pseudo([1, 2, 5, 6], 3);
        assert_eq!(resize_bilinear(&x, (5, 6)).unwrap(), x);
        let c = Tensor::full([1, 1, 7, 5], 0.3);
        let up = resize_bilinear(&c, (11, 13)).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn resize_half_pixel_upsample_of_two_pixels() {
        // [0, 1] -> 4 samples at source coords -0.25(clamped), 0.25, 0.75, 1.25(clamped)
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, (1, 4)).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn adaptive_windows_cover_axis() {
        assert_eq!(adaptive_window(0, 24, 16), (0, 2));
        assert_eq!(adaptive_window(1, 24, 16), (1, 3));
        assert_eq!(adaptive_window(15, 24, 16), (22, 24));
        assert_eq!(adaptive_window(3, 4, 4), (3, 4));
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = pseudo([2, 3, 4, 4], 9).map(|v| v * 30.0);
        let y = softmax_channels(&x);
        for b in 0..2 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let s: f64 = (0..3).map(|c| y.at(b, c, yy, xx)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &v in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(v + 1e-6) - gelu(v - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(v)).abs() < 1e-8);
        }
    }
}

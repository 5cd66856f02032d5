//! 2-D cross-correlation with zero padding and channel groups.
//!
//! Two kernels compute the same sums: a direct loop nest and a lowered
//! patch-matrix (im2col) product. Both accumulate in `f64` and visit the
//! reduction index (input channel, ky, kx) in the same order, so they agree
//! to rounding of the final store. Depthwise layers use the direct kernel,
//! dense layers the lowered one.

use rayon::prelude::*;

use super::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dParams {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvAlgo {
    /// Pick per layer: direct for depthwise, lowered otherwise.
    Auto,
    Direct,
    Lowered,
}

/// Output extent along one axis, or `None` if it would be empty.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    p: Conv2dParams,
}

impl Geometry {
    fn kernel_len(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.p.stride == (1, 1)
            && self.p.padding == (0, 0)
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.p.groups == self.cin
    }
}

fn geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<Geometry> {
    let (n, cin, h, wd) = x.dims4("conv2d")?;
    let (cout, cin_g, kh, kw) = w.dims4("conv2d weight")?;
    if p.groups == 0 || cout % p.groups != 0 || cin % p.groups != 0 {
        return Err(Error::invalid(format!(
            "conv2d: groups {} must divide in_channels {} and out_channels {}",
            p.groups, cin, cout
        )));
    }
    if cin != p.groups * cin_g {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input with {} channels for weight {} and groups {}",
                p.groups * cin_g,
                shape_str(w.shape()),
                p.groups
            ),
            format!("input {}", shape_str(x.shape())),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d bias", format!("[{}]", cout), shape_str(b.shape())));
        }
    }
    let oh = conv_out_extent(h, kh, p.stride.0, p.padding.0);
    let ow = conv_out_extent(wd, kw, p.stride.1, p.padding.1);
    let (oh, ow) = match (oh, ow) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::invalid(format!(
                "conv2d: empty output for input {} and kernel {} (stride {:?}, padding {:?})",
                shape_str(x.shape()),
                shape_str(w.shape()),
                p.stride,
                p.padding
            )))
        }
    };
    Ok(Geometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        cin_g,
        cout_g: cout / p.groups,
        kh,
        kw,
        oh,
        ow,
        p,
    })
}

/// Patch matrix of one sample/group: rows (ci, ky, kx), columns output pixels.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, group: usize) -> Vec<T> {
    let (oh, ow) = (g.oh, g.ow);
    let mut col = vec![T::zero(); g.kernel_len() * oh * ow];
    let (sh, sw) = g.p.stride;
    let (ph, pw) = g.p.padding;
    let mut row = 0;
    for ci in 0..g.cin_g {
        let plane = &x[(group * g.cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            *d = src[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Scatter-adds a patch-matrix gradient back onto the input plane layout.
fn col2im(col: &[f64], g: &Geometry, group: usize, dx: &mut [f64]) {
    let (oh, ow) = (g.oh, g.ow);
    let (sh, sw) = g.p.stride;
    let (ph, pw) = g.p.padding;
    let mut row = 0;
    for ci in 0..g.cin_g {
        let plane = &mut dx[(group * g.cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `acc[m][p] += Σ_k a[m][k] * b[k][p]`, k ascending.
fn gemm_accumulate<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize, acc: &mut [f64]) {
    for mi in 0..m {
        let arow = &a[mi * k..(mi + 1) * k];
        let out = &mut acc[mi * p..(mi + 1) * p];
        for (ki, &av) in arow.iter().enumerate() {
            let av = av.as_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[ki * p..(ki + 1) * p];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv.as_f64();
            }
        }
    }
}

fn forward_sample_lowered<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &Geometry,
    out: &mut [T],
) {
    let pix = g.oh * g.ow;
    let klen = g.kernel_len();
    let mut acc = vec![0.0f64; g.cout_g * pix];
    for grp in 0..g.p.groups {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let wg = &w[grp * g.cout_g * klen..(grp + 1) * g.cout_g * klen];
        if g.is_pointwise() {
            let xg = &x[grp * g.cin_g * pix..(grp + 1) * g.cin_g * pix];
            gemm_accumulate(wg, xg, g.cout_g, klen, pix, &mut acc);
        } else {
            let col = im2col(x, g, grp);
            gemm_accumulate(wg, &col, g.cout_g, klen, pix, &mut acc);
        }
        for co in 0..g.cout_g {
            let oc = grp * g.cout_g + co;
            let b = bias.map_or(0.0, |b| b[oc].as_f64());
            let dst = &mut out[oc * pix..(oc + 1) * pix];
            for (d, &a) in dst.iter_mut().zip(&acc[co * pix..(co + 1) * pix]) {
                *d = T::of(a + b);
            }
        }
    }
}

fn forward_sample_direct<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &Geometry,
    out: &mut [T],
) {
    let pix = g.oh * g.ow;
    let (sh, sw) = g.p.stride;
    let (ph, pw) = (g.p.padding.0 as isize, g.p.padding.1 as isize);
    let mut acc = vec![0.0f64; pix];
    for oc in 0..g.cout {
        let grp = oc / g.cout_g;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for ci in 0..g.cin_g {
            let plane = &x[(grp * g.cin_g + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((oc * g.cin_g + ci) * g.kh + ky) * g.kw + kx].as_f64();
                    // valid output column range for this tap
                    let ox_lo = ((pw - kx as isize).max(0) as usize).div_ceil(sw);
                    let ox_hi = {
                        let lim = g.w as isize + pw - kx as isize;
                        if lim <= 0 {
                            0
                        } else {
                            ((lim as usize - 1) / sw + 1).min(g.ow)
                        }
                    };
                    for oy in 0..g.oh {
                        let iy = (oy * sh + ky) as isize - ph;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..];
                        let dst = &mut acc[oy * g.ow..(oy + 1) * g.ow];
                        let x0 = (ox_lo * sw + kx) as isize - pw;
                        let x0 = x0 as usize;
                        if sw == 1 {
                            for (d, v) in dst[ox_lo..ox_hi].iter_mut().zip(&src[x0..x0 + ox_hi - ox_lo]) {
                                *d += wv * v.as_f64();
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox] += wv * src[x0 + (ox - ox_lo) * sw].as_f64();
                            }
                        }
                    }
                }
            }
        }
        let b = bias.map_or(0.0, |b| b[oc].as_f64());
        for (d, &a) in out[oc * pix..(oc + 1) * pix].iter_mut().zip(&acc) {
            *d = T::of(a + b);
        }
    }
}

/// (c, n·pix) channel-major copy of an (n, c, pix) batch.
fn channel_major<T: Scalar>(x: &[T], n: usize, c: usize, pix: usize) -> Vec<f64> {
    let np = n * pix;
    let mut out = vec![0.0f64; c * np];
    for s in 0..n {
        for k in 0..c {
            let src = &x[(s * c + k) * pix..][..pix];
            for (d, v) in out[k * np + s * pix..][..pix].iter_mut().zip(src) {
                *d = v.as_f64();
            }
        }
    }
    out
}

/// Inverse of [`channel_major`].
fn batch_major(m: &[f64], n: usize, c: usize, pix: usize) -> Vec<f64> {
    let np = n * pix;
    let mut out = vec![0.0f64; n * c * pix];
    for s in 0..n {
        for k in 0..c {
            out[(s * c + k) * pix..][..pix].copy_from_slice(&m[k * np + s * pix..][..pix]);
        }
    }
    out
}

fn batched_pointwise(g: &Geometry) -> bool {
    g.is_pointwise() && g.p.groups == 1
}

/// Dense 1×1 convolution as one product over the whole batch.
fn forward_pointwise_batched<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geometry) -> Vec<T> {
    let pix = g.oh * g.ow;
    let np = g.n * pix;
    let xb = channel_major(x, g.n, g.cin, pix);
    let mut ob = vec![0.0f64; g.cout * np];
    ob.par_chunks_mut(np.max(1)).enumerate().for_each(|(co, row)| {
        for k in 0..g.cin {
            let wv = w[co * g.cin + k].as_f64();
            if wv == 0.0 {
                continue;
            }
            for (o, &xv) in row.iter_mut().zip(&xb[k * np..(k + 1) * np]) {
                *o += wv * xv;
            }
        }
        if let Some(b) = bias {
            let b = b[co].as_f64();
            row.iter_mut().for_each(|o| *o += b);
        }
    });
    batch_major(&ob, g.n, g.cout, pix).into_iter().map(T::of).collect()
}

fn select(algo: ConvAlgo, g: &Geometry) -> ConvAlgo {
    match algo {
        ConvAlgo::Auto if g.is_depthwise() => ConvAlgo::Direct,
        ConvAlgo::Auto => ConvAlgo::Lowered,
        other => other,
    }
}

/// Forward convolution with an explicit kernel choice.
pub fn conv2d_with<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    p: Conv2dParams,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let g = geometry(x, w, b, p)?;
    let algo = select(algo, &g);
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.oh * g.ow;
    let bias = b.map(|b| b.data());
    if algo == ConvAlgo::Lowered && batched_pointwise(&g) {
        let out = forward_pointwise_batched(x.data(), w.data(), bias, &g);
        return Ok(Tensor::new_unchecked(vec![g.n, g.cout, g.oh, g.ow], out));
    }
    let mut out = vec![T::zero(); g.n * out_per];
    out.par_chunks_mut(out_per)
        .zip(x.data().par_chunks(in_per))
        .for_each(|(o, xs)| match algo {
            ConvAlgo::Direct => forward_sample_direct(xs, w.data(), bias, &g, o),
            _ => forward_sample_lowered(xs, w.data(), bias, &g, o),
        });
    Ok(Tensor::new_unchecked(vec![g.n, g.cout, g.oh, g.ow], out))
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<Tensor<T>> {
    conv2d_with(x, w, b, p, ConvAlgo::Auto)
}

struct SampleGrads {
    dx: Option<Vec<f64>>,
    dw: Vec<f64>,
}

fn to_f64<T: Scalar>(s: &[T]) -> Vec<f64> {
    s.iter().map(|v| v.as_f64()).collect()
}

/// Dot product with four fixed partial sums, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Valid output-column range [lo, hi) for kernel column `kx`.
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let sw = g.p.stride.1;
    let pw = g.p.padding.1 as isize;
    let lo = ((pw - kx as isize).max(0) as usize).div_ceil(sw);
    let lim = g.w as isize + pw - kx as isize;
    let hi = if lim <= 0 { 0 } else { ((lim as usize - 1) / sw + 1).min(g.ow) };
    (lo, hi.max(lo))
}

fn backward_sample_lowered(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &Geometry,
    need_dx: bool,
    need_dw: bool,
) -> SampleGrads {
    let pix = g.oh * g.ow;
    let klen = g.kernel_len();
    let mut dw = vec![0.0f64; if need_dw { g.cout * klen } else { 0 }];
    let mut dx = if need_dx {
        Some(vec![0.0f64; g.cin * g.h * g.w])
    } else {
        None
    };
    let mut dcol = vec![0.0f64; if need_dx { klen * pix } else { 0 }];
    for grp in 0..g.p.groups {
        let col_owned;
        let col: &[f64] = if g.is_pointwise() {
            &x[grp * g.cin_g * pix..(grp + 1) * g.cin_g * pix]
        } else {
            col_owned = im2col(x, g, grp);
            &col_owned
        };
        let gg = &gout[grp * g.cout_g * pix..(grp + 1) * g.cout_g * pix];
        if need_dw {
            for co in 0..g.cout_g {
                let grow = &gg[co * pix..(co + 1) * pix];
                let dwrow = &mut dw[(grp * g.cout_g + co) * klen..][..klen];
                for (k, d) in dwrow.iter_mut().enumerate() {
                    *d = dot(grow, &col[k * pix..(k + 1) * pix]);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let wg = &w[grp * g.cout_g * klen..(grp + 1) * g.cout_g * klen];
            dcol.iter_mut().for_each(|d| *d = 0.0);
            for co in 0..g.cout_g {
                let grow = &gg[co * pix..(co + 1) * pix];
                for k in 0..klen {
                    let wv = wg[co * klen + k];
                    if wv == 0.0 {
                        continue;
                    }
                    let drow = &mut dcol[k * pix..(k + 1) * pix];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            }
            if g.is_pointwise() {
                let dst = &mut dx[grp * g.cin_g * pix..(grp + 1) * g.cin_g * pix];
                for (d, s) in dst.iter_mut().zip(&dcol) {
                    *d += s;
                }
            } else {
                col2im(&dcol, g, grp, dx);
            }
        }
    }
    SampleGrads { dx, dw }
}

fn backward_sample_direct(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &Geometry,
    need_dx: bool,
    need_dw: bool,
) -> SampleGrads {
    let (sh, sw) = g.p.stride;
    let (ph, pw) = (g.p.padding.0 as isize, g.p.padding.1 as isize);
    let klen = g.kernel_len();
    let mut dw = vec![0.0f64; if need_dw { g.cout * klen } else { 0 }];
    let mut dx = if need_dx {
        Some(vec![0.0f64; g.cin * g.h * g.w])
    } else {
        None
    };
    let pix = g.oh * g.ow;
    for oc in 0..g.cout {
        let grp = oc / g.cout_g;
        let gplane = &gout[oc * pix..(oc + 1) * pix];
        for ci in 0..g.cin_g {
            let cidx = grp * g.cin_g + ci;
            let plane = &x[cidx * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((oc * g.cin_g + ci) * g.kh + ky) * g.kw + kx;
                    let wv = w[widx];
                    let (lo, hi) = valid_cols(g, kx);
                    let mut dwv = 0.0f64;
                    for oy in 0..g.oh {
                        let iy = (oy * sh + ky) as isize - ph;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        let base = iy as usize * g.w;
                        if lo == hi {
                            continue;
                        }
                        // input column of output column ox is ox·sw + kx − pw
                        let x0 = lo * sw + kx - pw as usize;
                        if need_dw {
                            let xrow = &plane[base..base + g.w];
                            if sw == 1 {
                                for (gv, xv) in grow[lo..hi].iter().zip(&xrow[x0..x0 + hi - lo]) {
                                    dwv += gv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    dwv += grow[ox] * xrow[x0 + (ox - lo) * sw];
                                }
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let drow = &mut dx[cidx * g.h * g.w + base..][..g.w];
                            if sw == 1 {
                                for (d, gv) in drow[x0..x0 + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ox in lo..hi {
                                    drow[x0 + (ox - lo) * sw] += wv * grow[ox];
                                }
                            }
                        }
                    }
                    if need_dw {
                        dw[widx] = dwv;
                    }
                }
            }
        }
    }
    SampleGrads { dx, dw }
}

/// Input and weight gradients of a dense 1×1 convolution over the batch.
fn backward_pointwise_batched<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &Geometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let pix = g.oh * g.ow;
    let np = g.n * pix;
    let gb = channel_major(gout, g.n, g.cout, pix);
    let dw = need_dw.then(|| {
        let xb = channel_major(x, g.n, g.cin, pix);
        let mut dw = vec![0.0f64; g.cout * g.cin];
        dw.par_chunks_mut(g.cin).enumerate().for_each(|(co, row)| {
            let grow = &gb[co * np..(co + 1) * np];
            for (k, d) in row.iter_mut().enumerate() {
                *d = dot(grow, &xb[k * np..(k + 1) * np]);
            }
        });
        dw
    });
    let dx = need_dx.then(|| {
        let mut dxb = vec![0.0f64; g.cin * np];
        dxb.par_chunks_mut(np.max(1)).enumerate().for_each(|(k, row)| {
            for co in 0..g.cout {
                let wv = w[co * g.cin + k].as_f64();
                if wv == 0.0 {
                    continue;
                }
                for (d, &gv) in row.iter_mut().zip(&gb[co * np..(co + 1) * np]) {
                    *d += wv * gv;
                }
            }
        });
        batch_major(&dxb, g.n, g.cin, pix)
    });
    (dx, dw)
}

fn bias_grad<T: Scalar>(grad: &Tensor<T>, g: &Geometry) -> Tensor<T> {
    let pix = g.oh * g.ow;
    let mut acc = vec![0.0f64; g.cout];
    for s in grad.data().chunks(g.cout * pix) {
        for (oc, a) in acc.iter_mut().enumerate() {
            *a += s[oc * pix..(oc + 1) * pix].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    Tensor::new_unchecked(vec![g.cout], acc.into_iter().map(T::of).collect())
}

struct Conv2dBackward {
    g: Geometry,
    algo: ConvAlgo,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let g = &self.g;
        let (x, w) = (inputs[0], inputs[1]);
        let (need_dx, need_dw) = (needs[0], needs[1]);
        let need_db = self.has_bias && needs[2];
        let in_per = g.cin * g.h * g.w;
        let out_per = g.cout * g.oh * g.ow;

        if self.algo == ConvAlgo::Lowered && batched_pointwise(g) {
            let (dx, dw) = backward_pointwise_batched(x.data(), w.data(), grad.data(), g, need_dx, need_dw);
            let mut out = vec![
                dx.map(|d| Tensor::new_unchecked(x.shape().to_vec(), d.into_iter().map(T::of).collect())),
                dw.map(|d| Tensor::new_unchecked(w.shape().to_vec(), d.into_iter().map(T::of).collect())),
            ];
            if self.has_bias {
                out.push(need_db.then(|| bias_grad(grad, g)));
            }
            return out;
        }
        let w64 = to_f64(w.data());
        let per_sample: Vec<SampleGrads> = x
            .data()
            .par_chunks(in_per)
            .zip(grad.data().par_chunks(out_per))
            .map(|(xs, gs)| {
                let (xs, gs) = (to_f64(xs), to_f64(gs));
                match self.algo {
                    ConvAlgo::Direct => backward_sample_direct(&xs, &w64, &gs, g, need_dx, need_dw),
                    _ => backward_sample_lowered(&xs, &w64, &gs, g, need_dx, need_dw),
                }
            })
            .collect();

        let dx = need_dx.then(|| {
            let mut data = Vec::with_capacity(g.n * in_per);
            for s in &per_sample {
                data.extend(s.dx.as_ref().unwrap().iter().map(|&v| T::of(v)));
            }
            Tensor::new_unchecked(x.shape().to_vec(), data)
        });
        let dw = need_dw.then(|| {
            let mut acc = vec![0.0f64; w.len()];
            for s in &per_sample {
                for (a, v) in acc.iter_mut().zip(&s.dw) {
                    *a += v;
                }
            }
            Tensor::new_unchecked(w.shape().to_vec(), acc.into_iter().map(T::of).collect())
        });
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(need_db.then(|| bias_grad(grad, g)));
        }
        out
    }
}

impl<T: Scalar> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        self.conv2d_with(x, w, b, p, ConvAlgo::Auto)
    }

    pub fn conv2d_with(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        p: Conv2dParams,
        algo: ConvAlgo,
    ) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let bt = b.map(|b| self.value(b));
        let g = geometry(xt, wt, bt, p)?;
        let algo = select(algo, &g);
        let out = conv2d_with(xt, wt, bt, p, algo)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(
            out,
            &inputs,
            Box::new(Conv2dBackward {
                g,
                algo,
                has_bias: b.is_some(),
            }),
        ))
    }

    /// 1×1 convolution, stride 1, no padding.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
            return Err(Error::shape("pointwise_conv", "(c_out, c_in, 1, 1) weight", shape_str(ws)));
        }
        self.conv2d(x, w, b, Conv2dParams::default())
    }

    /// Per-channel k×k convolution (groups equal to the channel count).
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        let ws = self.shape(w);
        if ws.len() != 4 || ws[1] != 1 || ws[0] != c {
            return Err(Error::shape(
                "depthwise_conv",
                format!("({}, 1, k, k) weight", c),
                shape_str(ws),
            ));
        }
        self.conv2d(x, w, b, Conv2dParams::new(stride, padding, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Seven nested loops straight from the definition.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, p: Conv2dParams) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4("ref").unwrap();
        let (cout, cin_g, kh, kw) = w.dims4("ref").unwrap();
        let cout_g = cout / p.groups;
        let oh = (h + 2 * p.padding.0 - kh) / p.stride.0 + 1;
        let ow = (wd + 2 * p.padding.1 - kw) / p.stride.1 + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for s in 0..n {
            for oc in 0..cout {
                let grp = oc / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[oc]);
                        for ci in 0..cin_g {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride.0 + ky) as isize - p.padding.0 as isize;
                                    let ix = (ox * p.stride.1 + kx) as isize - p.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let c = grp * cin_g + ci;
                                    acc += w[((oc * cin_g + ci) * kh + ky) * kw + kx]
                                        * x[((s * cin + c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((s * cout + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
    }

    fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]).unwrap();
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3]).unwrap();
        let y = conv2d(&x, &w, None, Conv2dParams::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y[0], 9.0);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[1, 1, 3, 3], 1.0, &mut rng).unwrap();
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1]).unwrap();
        assert_eq!(conv2d(&x, &w, None, Conv2dParams::default()).unwrap(), x);
    }

    #[test]
    fn strided_dense_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 4, 8, 8], 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::randn(&[6, 4, 3, 3], 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::randn(&[6], 1.0, &mut rng).unwrap();
        let p = Conv2dParams::new(2, 1, 1);
        let expect = reference(&x, &w, Some(&b), p);
        for algo in [ConvAlgo::Direct, ConvAlgo::Lowered] {
            let got = conv2d_with(&x, &w, Some(&b), p, algo).unwrap();
            assert_eq!(got.shape(), &[2, 6, 4, 4]);
            assert!(max_rel(&got, &expect) < 1e-5, "{:?}", algo);
        }
    }

    #[test]
    fn depthwise_matches_grouped_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[1, 3, 5, 5], 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::randn(&[3, 1, 3, 3], 1.0, &mut rng).unwrap();
        let p = Conv2dParams::new(1, 1, 3);
        let got = conv2d(&x, &w, None, p).unwrap();
        assert!(max_rel(&got, &reference(&x, &w, None, p)) < 1e-5);
    }

    #[test]
    fn direct_and_lowered_agree_in_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(cin, cout, k, s, pad, groups) in &[
            (3, 8, 7, 2, 3, 1),
            (8, 8, 3, 1, 1, 8),
            (6, 4, 1, 1, 0, 2),
            (4, 4, 3, 2, 0, 1),
        ] {
            let x = Tensor::<f32>::randn(&[2, cin, 9, 7], 1.0, &mut rng).unwrap();
            let w = Tensor::<f32>::randn(&[cout, cin / groups, k, k], 1.0, &mut rng).unwrap();
            let p = Conv2dParams::new(s, pad, groups);
            let a = conv2d_with(&x, &w, None, p, ConvAlgo::Direct).unwrap();
            let b = conv2d_with(&x, &w, None, p, ConvAlgo::Lowered).unwrap();
            let rel = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs() as f64 / (x.abs().max(y.abs()) as f64).max(1e-6))
                .fold(0.0, f64::max);
            assert!(rel <= 1e-5, "k={} groups={} rel={}", k, groups, rel);
        }
    }

    #[test]
    fn rejects_mismatch_and_empty_output() {
        let x = Tensor::<f32>::ones(&[1, 3, 4, 4]).unwrap();
        let w = Tensor::<f32>::ones(&[2, 2, 3, 3]).unwrap();
        let err = conv2d(&x, &w, None, Conv2dParams::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x2x3x3]") && msg.contains("[1x3x4x4]"), "{}", msg);

        let w = Tensor::<f32>::ones(&[2, 3, 5, 5]).unwrap();
        assert!(conv2d(&x, &w, None, Conv2dParams::default()).is_err());
    }
}

//! 2-D convolution (cross-correlation) via patch gathering and real GEMM.
//!
//! A complex convolution `(X + iY) * (a + ib)` is assembled from real
//! convolutions of the planes. The Gauss variant needs three products:
//! `t1 = X*a`, `t2 = Y*b`, `t3 = (X+Y)*(a+b)`, giving
//! `re = t1 - t2` and `im = t3 - t1 - t2`.

use serde::{Deserialize, Serialize};

use super::{ComplexTensor, Real, Tensor};
use crate::{CdsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMethod {
    /// Four real products per complex product.
    Direct,
    /// Three real products (Gauss' trick).
    #[default]
    Gauss,
}

/// Resolved sizes of one convolution call.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], p: Conv2dParams) -> Result<(Self, bool)> {
        let (batch, c_in, h, w, batched) = match *input {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => return Err(CdsError::shape(format!("conv input must be [C,H,W] or [N,C,H,W], got {input:?}"))),
        };
        let [c_out, c_in_g, kh, kw] = *weight else {
            return Err(CdsError::shape(format!("conv weight must be [C_out,C_in/groups,K,K], got {weight:?}")));
        };
        if p.groups == 0 || p.stride == 0 {
            return Err(CdsError::shape("groups and stride must be positive"));
        }
        if c_in % p.groups != 0 || c_out % p.groups != 0 {
            return Err(CdsError::shape(format!(
                "channels ({c_in} in, {c_out} out) not divisible by groups {}",
                p.groups
            )));
        }
        if c_in / p.groups != c_in_g {
            return Err(CdsError::shape(format!(
                "weight expects {c_in_g} input channels per group, input has {}",
                c_in / p.groups
            )));
        }
        if h + 2 * p.padding < kh || w + 2 * p.padding < kw {
            return Err(CdsError::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * p.padding,
                w + 2 * p.padding
            )));
        }
        let h_out = (h + 2 * p.padding - kh) / p.stride + 1;
        let w_out = (w + 2 * p.padding - kw) / p.stride + 1;
        Ok((
            Self { batch, c_in, h, w, c_out, kh, kw, h_out, w_out, stride: p.stride, padding: p.padding, groups: p.groups },
            batched,
        ))
    }

    fn cg(&self) -> usize {
        self.c_in / self.groups
    }

    fn og(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of a gathered patch matrix for one group.
    fn patch_rows(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn pixels_out(&self) -> usize {
        self.h_out * self.w_out
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.h_out, self.w_out]
        } else {
            vec![self.c_out, self.h_out, self.w_out]
        }
    }

    /// Offset of channel `c0` of sample `n` in the input plane.
    fn input_offset(&self, n: usize, c0: usize) -> usize {
        (n * self.c_in + c0) * self.h * self.w
    }

    fn output_offset(&self, n: usize, o0: usize) -> usize {
        (n * self.c_out + o0) * self.pixels_out()
    }

    fn weight_offset(&self, o0: usize) -> usize {
        o0 * self.patch_rows()
    }
}

/// Upper bound on the entries of one gathered patch matrix; batches are
/// processed in chunks of samples that fit.
const PATCH_BUDGET: usize = 1 << 18;

impl Geometry {
    fn chunk(&self) -> usize {
        (PATCH_BUDGET / (self.patch_rows() * self.pixels_out()).max(1)).clamp(1, self.batch)
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let (batch, chunk) = (self.batch, self.chunk());
        (0..batch).step_by(chunk).map(move |n0| (n0, chunk.min(batch - n0)))
    }
}

/// Few output channels at stride 1: accumulate tap by tap instead of
/// materialising patch matrices.
fn use_stencil(g: &Geometry) -> bool {
    g.stride == 1 && g.og() <= 2
}

/// Calls `f(input_start, output_start, len)` for every output row run that
/// tap `(ky, kx)` reads from a single input plane (stride 1).
fn for_each_run(g: &Geometry, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let ox0 = g.padding.saturating_sub(kx);
    let ox1 = (g.w + g.padding).saturating_sub(kx).min(g.w_out);
    if ox0 >= ox1 {
        return;
    }
    for oy in 0..g.h_out {
        let iy = (oy + ky) as isize - g.padding as isize;
        if iy >= 0 && iy < g.h as isize {
            f(iy as usize * g.w + ox0 + kx - g.padding, oy * g.w_out + ox0, ox1 - ox0);
        }
    }
}

/// Visits `(input base, output base, weight index, ky, kx)` for every tap.
fn for_each_tap(g: &Geometry, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    for n in 0..g.batch {
        for oc in 0..g.c_out {
            let grp = oc / g.og();
            let ob = g.output_offset(n, oc);
            for c in 0..g.cg() {
                let ib = g.input_offset(n, grp * g.cg() + c);
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        f(ib, ob, g.weight_offset(oc) + (c * g.kh + ky) * g.kw + kx, ky, kx);
                    }
                }
            }
        }
    }
}

fn stencil_forward<T: Real>(g: &Geometry, z: &ComplexTensor<T>, w: &ComplexTensor<T>, or: &mut [T], oi: &mut [T]) {
    let (zr, zi) = (z.re(), z.im());
    for_each_tap(g, |ib, ob, wi, ky, kx| {
        let (a, b) = (w.re()[wi], w.im()[wi]);
        for_each_run(g, ky, kx, |i0, o0, len| {
            let (xr, xi) = (&zr[ib + i0..ib + i0 + len], &zi[ib + i0..ib + i0 + len]);
            let (yr, yi) = (&mut or[ob + o0..ob + o0 + len], &mut oi[ob + o0..ob + o0 + len]);
            for t in 0..len {
                yr[t] += a * xr[t] - b * xi[t];
                yi[t] += a * xi[t] + b * xr[t];
            }
        });
    });
}

#[allow(clippy::too_many_arguments)]
fn stencil_backward<T: Real>(
    g: &Geometry,
    z: &ComplexTensor<T>,
    w: &ComplexTensor<T>,
    grad: &ComplexTensor<T>,
    gw_re: &mut [T],
    gw_im: &mut [T],
    gz_re: &mut [T],
    gz_im: &mut [T],
    need_input: bool,
) {
    let (zr, zi, gr, gi) = (z.re(), z.im(), grad.re(), grad.im());
    for_each_tap(g, |ib, ob, wi, ky, kx| {
        let (a, b) = (w.re()[wi], w.im()[wi]);
        let (mut sr, mut si) = (T::zero(), T::zero());
        for_each_run(g, ky, kx, |i0, o0, len| {
            let (xr, xi) = (&zr[ib + i0..ib + i0 + len], &zi[ib + i0..ib + i0 + len]);
            let (hr, hi) = (&gr[ob + o0..ob + o0 + len], &gi[ob + o0..ob + o0 + len]);
            for t in 0..len {
                sr += xr[t] * hr[t] + xi[t] * hi[t];
                si += xr[t] * hi[t] - xi[t] * hr[t];
            }
            if need_input {
                let (dr, di) = (&mut gz_re[ib + i0..ib + i0 + len], &mut gz_im[ib + i0..ib + i0 + len]);
                for t in 0..len {
                    dr[t] += a * hr[t] + b * hi[t];
                    di[t] += a * hi[t] - b * hr[t];
                }
            }
        });
        gw_re[wi] += sr;
        gw_im[wi] += si;
    });
}

fn real_stencil_forward<T: Real>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    for_each_tap(g, |ib, ob, wi, ky, kx| {
        let a = w[wi];
        for_each_run(g, ky, kx, |i0, o0, len| {
            let (src, dst) = (&x[ib + i0..ib + i0 + len], &mut out[ob + o0..ob + o0 + len]);
            for t in 0..len {
                dst[t] += a * src[t];
            }
        });
    });
}

fn real_stencil_backward<T: Real>(g: &Geometry, x: &[T], w: &[T], grad: &[T], gw: &mut [T], gx: &mut [T], need_input: bool) {
    for_each_tap(g, |ib, ob, wi, ky, kx| {
        let a = w[wi];
        let mut s = T::zero();
        for_each_run(g, ky, kx, |i0, o0, len| {
            let (src, h) = (&x[ib + i0..ib + i0 + len], &grad[ob + o0..ob + o0 + len]);
            for t in 0..len {
                s += src[t] * h[t];
            }
            if need_input {
                let dst = &mut gx[ib + i0..ib + i0 + len];
                for t in 0..len {
                    dst[t] += a * h[t];
                }
            }
        });
        gw[wi] += s;
    });
}

/// Gathers the receptive fields of group `grp` for samples `n0..n0+cn` into
/// `cols` (`[cg·kh·kw, cn·h_out·w_out]`, samples side by side).
fn im2col<T: Real>(g: &Geometry, src: &[T], n0: usize, cn: usize, grp: usize, cols: &mut [T]) {
    let pix = g.pixels_out();
    let ld = cn * pix;
    for j in 0..cn {
        let base = g.input_offset(n0 + j, grp * g.cg());
        for c in 0..g.cg() {
            let plane = &src[base + c * g.h * g.w..base + (c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = ((c * g.kh + ky) * g.kw + kx) * ld + j * pix;
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let dst = &mut cols[row + oy * g.w_out..row + (oy + 1) * g.w_out];
                        if iy < 0 || iy >= g.h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, v) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { line[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients into `dst`.
fn col2im<T: Real>(g: &Geometry, cols: &[T], n0: usize, cn: usize, grp: usize, dst: &mut [T]) {
    let pix = g.pixels_out();
    let ld = cn * pix;
    for j in 0..cn {
        let base = g.input_offset(n0 + j, grp * g.cg());
        for c in 0..g.cg() {
            let plane = &mut dst[base + c * g.h * g.w..base + (c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = ((c * g.kh + ky) * g.kw + kx) * ld + j * pix;
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy as usize * g.w + ix as usize] += cols[row + oy * g.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies the group-`grp` block of an output-shaped tensor for samples
/// `n0..n0+cn` into `[og, cn·pix]`.
fn gather_out<T: Real>(g: &Geometry, src: &[T], n0: usize, cn: usize, grp: usize, dst: &mut [T]) {
    let pix = g.pixels_out();
    for o in 0..g.og() {
        for j in 0..cn {
            let s = g.output_offset(n0 + j, grp * g.og() + o);
            let d = (o * cn + j) * pix;
            dst[d..d + pix].copy_from_slice(&src[s..s + pix]);
        }
    }
}

/// Index pairs `(output index, block index)` of [`gather_out`], per pixel run.
fn out_runs(g: &Geometry, n0: usize, cn: usize, grp: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let pix = g.pixels_out();
    (0..g.og()).flat_map(move |o| (0..cn).map(move |j| (g.output_offset(n0 + j, grp * g.og() + o), (o * cn + j) * pix)))
}

/// Complex convolution of `z` with `w`; both bias-free.
///
/// `z` is `[C_in,H,W]` or `[N,C_in,H,W]`, `w` is `[C_out,C_in/groups,K,K]`.
pub fn conv2d<T: Real>(
    z: &ComplexTensor<T>,
    w: &ComplexTensor<T>,
    params: Conv2dParams,
    method: ConvMethod,
) -> Result<ComplexTensor<T>> {
    let (g, batched) = Geometry::new(z.shape(), w.shape(), params)?;
    let rows = g.patch_rows();
    let pix = g.pixels_out();
    let og = g.og();
    let chunk = g.chunk();
    let mut out_re = vec![T::zero(); g.batch * g.c_out * pix];
    let mut out_im = vec![T::zero(); g.batch * g.c_out * pix];
    if use_stencil(&g) {
        stencil_forward(&g, z, w, &mut out_re, &mut out_im);
        return ComplexTensor::from_planes(&g.out_shape(batched), out_re, out_im);
    }
    let mut cols_a = vec![T::zero(); rows * chunk * pix];
    let mut cols_b = vec![T::zero(); rows * chunk * pix];
    let mut t1 = vec![T::zero(); og * chunk * pix];
    let mut t2 = t1.clone();
    let mut t3 = t1.clone();
    let (x, y) = (w.re(), w.im());
    let xy: Vec<T> = x.iter().zip(y).map(|(&p, &q)| p + q).collect();

    for (n0, cn) in g.chunks() {
        let ld = cn * pix;
        for grp in 0..g.groups {
            let (ca, cb) = (&mut cols_a[..rows * ld], &mut cols_b[..rows * ld]);
            im2col(&g, z.re(), n0, cn, grp, ca);
            im2col(&g, z.im(), n0, cn, grp, cb);
            let wo = g.weight_offset(grp * og);
            let (wx, wy, wxy) = (&x[wo..wo + og * rows], &y[wo..wo + og * rows], &xy[wo..wo + og * rows]);
            let (t1, t2, t3) = (&mut t1[..og * ld], &mut t2[..og * ld], &mut t3[..og * ld]);
            match method {
                ConvMethod::Direct => {
                    // t1 = re, t2 = im.
                    T::gemm(og, rows, ld, T::one(), wx, ca, T::zero(), t1);
                    T::gemm(og, rows, ld, -T::one(), wy, cb, T::one(), t1);
                    T::gemm(og, rows, ld, T::one(), wx, cb, T::zero(), t2);
                    T::gemm(og, rows, ld, T::one(), wy, ca, T::one(), t2);
                    for (d, s) in out_runs(&g, n0, cn, grp) {
                        out_re[d..d + pix].copy_from_slice(&t1[s..s + pix]);
                        out_im[d..d + pix].copy_from_slice(&t2[s..s + pix]);
                    }
                }
                ConvMethod::Gauss => {
                    T::gemm(og, rows, ld, T::one(), wx, ca, T::zero(), t1);
                    T::gemm(og, rows, ld, T::one(), wy, cb, T::zero(), t2);
                    for (a, b) in ca.iter_mut().zip(cb.iter()) {
                        *a += *b;
                    }
                    T::gemm(og, rows, ld, T::one(), wxy, ca, T::zero(), t3);
                    for (d, s) in out_runs(&g, n0, cn, grp) {
                        for p in 0..pix {
                            let (a, b, c) = (t1[s + p], t2[s + p], t3[s + p]);
                            out_re[d + p] = a - b;
                            out_im[d + p] = c - a - b;
                        }
                    }
                }
            }
        }
    }
    ComplexTensor::from_planes(&g.out_shape(batched), out_re, out_im)
}

/// Gradients of a real loss through [`conv2d`].
///
/// With real-pair cotangents (`∂L/∂re + i·∂L/∂im`), the input cotangent is the
/// transposed convolution with `conj(w)` and the weight cotangent is the
/// correlation of `conj(z)` with the output cotangent. Returns
/// `(grad_input, grad_weight)`; the input gradient is skipped when
/// `need_input` is false.
pub fn conv2d_backward<T: Real>(
    z: &ComplexTensor<T>,
    w: &ComplexTensor<T>,
    params: Conv2dParams,
    grad_out: &ComplexTensor<T>,
    need_input: bool,
) -> Result<(Option<ComplexTensor<T>>, ComplexTensor<T>)> {
    let (g, batched) = Geometry::new(z.shape(), w.shape(), params)?;
    if grad_out.shape() != g.out_shape(batched).as_slice() {
        return Err(CdsError::shape(format!(
            "output cotangent {:?} does not match conv output {:?}",
            grad_out.shape(),
            g.out_shape(batched)
        )));
    }
    let rows = g.patch_rows();
    let pix = g.pixels_out();
    let og = g.og();
    let chunk = g.chunk();
    let (x, y) = (w.re(), w.im());
    // conj(W)ᵀ = P + iQ with P = X, Q = −Y; Gauss needs P + Q = X − Y.
    let neg_y: Vec<T> = y.iter().map(|&v| -v).collect();
    let x_minus_y: Vec<T> = x.iter().zip(y).map(|(&p, &q)| p - q).collect();

    let mut gw_re = vec![T::zero(); w.len()];
    let mut gw_im = vec![T::zero(); w.len()];
    let mut gz_re = vec![T::zero(); if need_input { z.len() } else { 0 }];
    let mut gz_im = vec![T::zero(); if need_input { z.len() } else { 0 }];
    if use_stencil(&g) {
        stencil_backward(&g, z, w, grad_out, &mut gw_re, &mut gw_im, &mut gz_re, &mut gz_im, need_input);
        let grad_w = ComplexTensor::from_planes(w.shape(), gw_re, gw_im)?;
        let grad_z = if need_input { Some(ComplexTensor::from_planes(z.shape(), gz_re, gz_im)?) } else { None };
        return Ok((grad_z, grad_w));
    }

    let patch = rows * chunk * pix;
    let mut cols_a = vec![T::zero(); patch];
    let mut cols_b = vec![T::zero(); patch];
    let mut gcol_re = vec![T::zero(); if need_input { patch } else { 0 }];
    let mut gcol_im = gcol_re.clone();
    let mut t_rows = gcol_re.clone();
    let mut gr = vec![T::zero(); og * chunk * pix];
    let mut gi = gr.clone();
    let mut gsum = gr.clone();
    let mut tw1 = vec![T::zero(); og * rows];
    let mut tw2 = tw1.clone();
    let mut tw3 = tw1.clone();

    for (n0, cn) in g.chunks() {
        let ld = cn * pix;
        for grp in 0..g.groups {
            let wo = g.weight_offset(grp * og);
            let (gr, gi, gsum) = (&mut gr[..og * ld], &mut gi[..og * ld], &mut gsum[..og * ld]);
            gather_out(&g, grad_out.re(), n0, cn, grp, gr);
            gather_out(&g, grad_out.im(), n0, cn, grp, gi);
            for ((s, a), b) in gsum.iter_mut().zip(gr.iter()).zip(gi.iter()) {
                *s = *a + *b;
            }

            // Weight cotangent: g · conj(cols)ᵀ = (gr + i gi)(aᵀ − i bᵀ).
            let (ca, cb) = (&mut cols_a[..rows * ld], &mut cols_b[..rows * ld]);
            im2col(&g, z.re(), n0, cn, grp, ca);
            im2col(&g, z.im(), n0, cn, grp, cb);
            T::gemm_nt(og, ld, rows, T::one(), gr, ca, T::zero(), &mut tw1);
            T::gemm_nt(og, ld, rows, -T::one(), gi, cb, T::zero(), &mut tw2);
            for (a, b) in ca.iter_mut().zip(cb.iter()) {
                *a -= *b;
            }
            T::gemm_nt(og, ld, rows, T::one(), gsum, ca, T::zero(), &mut tw3);
            for i in 0..og * rows {
                gw_re[wo + i] += tw1[i] - tw2[i];
                gw_im[wo + i] += tw3[i] - tw1[i] - tw2[i];
            }

            if need_input {
                let px = &x[wo..wo + og * rows];
                let qy = &neg_y[wo..wo + og * rows];
                let pq = &x_minus_y[wo..wo + og * rows];
                let (cr, ci, tr) = (&mut gcol_re[..rows * ld], &mut gcol_im[..rows * ld], &mut t_rows[..rows * ld]);
                T::gemm_tn(rows, og, ld, T::one(), px, gr, T::zero(), cr);
                T::gemm_tn(rows, og, ld, T::one(), qy, gi, T::zero(), tr);
                T::gemm_tn(rows, og, ld, T::one(), pq, gsum, T::zero(), ci);
                for ((r, i), t2) in cr.iter_mut().zip(ci.iter_mut()).zip(tr.iter()) {
                    let t1 = *r;
                    *r = t1 - *t2;
                    *i = *i - t1 - *t2;
                }
                col2im(&g, cr, n0, cn, grp, &mut gz_re);
                col2im(&g, ci, n0, cn, grp, &mut gz_im);
            }
        }
    }
    let grad_w = ComplexTensor::from_planes(w.shape(), gw_re, gw_im)?;
    let grad_z = if need_input { Some(ComplexTensor::from_planes(z.shape(), gz_re, gz_im)?) } else { None };
    Ok((grad_z, grad_w))
}

/// Nested-loop complex convolution, four real multiplies per tap.
///
/// Slow; kept for cross-checking the GEMM paths.
pub fn conv2d_direct<T: Real>(
    z: &ComplexTensor<T>,
    w: &ComplexTensor<T>,
    params: Conv2dParams,
) -> Result<ComplexTensor<T>> {
    let (g, batched) = Geometry::new(z.shape(), w.shape(), params)?;
    let mut out = ComplexTensor::zeros(&g.out_shape(batched))?;
    for n in 0..g.batch {
        for o in 0..g.c_out {
            let grp = o / g.og();
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = num_complex::Complex::new(T::zero(), T::zero());
                    for ci in 0..g.cg() {
                        let c = grp * g.cg() + ci;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let zi = ((n * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize;
                                let wi = ((o * g.cg() + ci) * g.kh + ky) * g.kw + kx;
                                acc = acc + z.get(zi) * w.get(wi);
                            }
                        }
                    }
                    out.set(((n * g.c_out + o) * g.h_out + oy) * g.w_out + ox, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Real convolution with optional per-output-channel bias.
pub fn real_conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    params: Conv2dParams,
) -> Result<Tensor<T>> {
    let (g, batched) = Geometry::new(x.shape(), w.shape(), params)?;
    let rows = g.patch_rows();
    let pix = g.pixels_out();
    let og = g.og();
    let chunk = g.chunk();
    let mut out = vec![T::zero(); g.batch * g.c_out * pix];
    if use_stencil(&g) {
        real_stencil_forward(&g, x.data(), w.data(), &mut out);
        if let Some(b) = bias {
            for (i, run) in out.chunks_mut(pix).enumerate() {
                run.iter_mut().for_each(|v| *v += b[i % g.c_out]);
            }
        }
        return Tensor::from_vec(&g.out_shape(batched), out);
    }
    let mut cols = vec![T::zero(); rows * chunk * pix];
    let mut t = vec![T::zero(); og * chunk * pix];
    for (n0, cn) in g.chunks() {
        let ld = cn * pix;
        for grp in 0..g.groups {
            let cols = &mut cols[..rows * ld];
            im2col(&g, x.data(), n0, cn, grp, cols);
            let wo = g.weight_offset(grp * og);
            let t = &mut t[..og * ld];
            T::gemm(og, rows, ld, T::one(), &w.data()[wo..wo + og * rows], cols, T::zero(), t);
            for (o, (d, s)) in out_runs(&g, n0, cn, grp).enumerate() {
                let b = bias.map_or(T::zero(), |b| b[grp * og + o / cn]);
                for p in 0..pix {
                    out[d + p] = t[s + p] + b;
                }
            }
        }
    }
    Tensor::from_vec(&g.out_shape(batched), out)
}

/// Returns `(grad_input, grad_weight, grad_bias)` for [`real_conv2d`].
pub fn real_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    params: Conv2dParams,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Vec<T>)> {
    let (g, batched) = Geometry::new(x.shape(), w.shape(), params)?;
    if grad_out.shape() != g.out_shape(batched).as_slice() {
        return Err(CdsError::shape("output cotangent does not match conv output"));
    }
    let rows = g.patch_rows();
    let pix = g.pixels_out();
    let og = g.og();
    let chunk = g.chunk();
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); g.c_out];
    let mut gx = vec![T::zero(); if need_input { x.len() } else { 0 }];
    if use_stencil(&g) {
        real_stencil_backward(&g, x.data(), w.data(), grad_out.data(), &mut gw, &mut gx, need_input);
        for (i, run) in grad_out.data().chunks(pix).enumerate() {
            gb[i % g.c_out] += run.iter().copied().sum::<T>();
        }
        let gx = if need_input { Some(Tensor::from_vec(x.shape(), gx)?) } else { None };
        return Ok((gx, Tensor::from_vec(w.shape(), gw)?, gb));
    }
    let mut cols = vec![T::zero(); rows * chunk * pix];
    let mut gcols = vec![T::zero(); if need_input { rows * chunk * pix } else { 0 }];
    let mut go = vec![T::zero(); og * chunk * pix];
    for (n0, cn) in g.chunks() {
        let ld = cn * pix;
        for grp in 0..g.groups {
            let wo = g.weight_offset(grp * og);
            let go = &mut go[..og * ld];
            gather_out(&g, grad_out.data(), n0, cn, grp, go);
            for (o, row) in go.chunks(ld).enumerate() {
                gb[grp * og + o] += row.iter().copied().sum::<T>();
            }
            let cols = &mut cols[..rows * ld];
            im2col(&g, x.data(), n0, cn, grp, cols);
            T::gemm_nt(og, ld, rows, T::one(), go, cols, T::one(), &mut gw[wo..wo + og * rows]);
            if need_input {
                let gc = &mut gcols[..rows * ld];
                T::gemm_tn(rows, og, ld, T::one(), &w.data()[wo..wo + og * rows], go, T::zero(), gc);
                col2im(&g, gc, n0, cn, grp, &mut gx);
            }
        }
    }
    let gx = if need_input { Some(Tensor::from_vec(x.shape(), gx)?) } else { None };
    Ok((gx, Tensor::from_vec(w.shape(), gw)?, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctensor::{make_tensor, Fill, Rng};
    use num_complex::Complex;

    fn rand_c(shape: &[usize], rng: &mut Rng) -> ComplexTensor<f64> {
        make_tensor(shape, Fill::Gaussian { rng, mean: 0.0, std: 1.0 }).unwrap()
    }

    fn rel_diff(a: &ComplexTensor<f64>, b: &ComplexTensor<f64>) -> f64 {
        let num = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        num / b.max_abs().max(1e-300)
    }

    #[test]
    fn scalar_product_case() {
        let z = ComplexTensor::from_complex(&[1, 1, 1], &[Complex::new(2.0, 0.0)]).unwrap();
        let w = ComplexTensor::from_complex(&[1, 1, 1, 1], &[Complex::new(1.0, 1.0)]).unwrap();
        for m in [ConvMethod::Direct, ConvMethod::Gauss] {
            let out = conv2d(&z, &w, Conv2dParams::default(), m).unwrap();
            assert_eq!(out.get(0), Complex::new(2.0, 2.0));
        }
    }

    #[test]
    fn gemm_paths_match_nested_loops() {
        let mut rng = Rng::new(5);
        let cases = [
            (vec![3, 8, 8], vec![4, 3, 3, 3], Conv2dParams { stride: 1, padding: 1, groups: 1 }),
            (vec![2, 4, 7, 6], vec![6, 2, 3, 3], Conv2dParams { stride: 2, padding: 1, groups: 2 }),
            (vec![4, 4, 4], vec![4, 1, 4, 4], Conv2dParams { stride: 1, padding: 0, groups: 4 }),
            (vec![2, 5, 6, 7], vec![1, 5, 3, 3], Conv2dParams { stride: 1, padding: 1, groups: 1 }),
            (vec![1, 2, 4, 3], vec![2, 2, 5, 5], Conv2dParams { stride: 1, padding: 2, groups: 1 }),
        ];
        for (zs, ws, p) in cases {
            let z = rand_c(&zs, &mut rng);
            let w = rand_c(&ws, &mut rng);
            let oracle = conv2d_direct(&z, &w, p).unwrap();
            for m in [ConvMethod::Direct, ConvMethod::Gauss] {
                let got = conv2d(&z, &w, p, m).unwrap();
                assert_eq!(got.shape(), oracle.shape());
                assert!(rel_diff(&got, &oracle) < 1e-12, "{m:?} {zs:?}");
            }
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let z = ComplexTensor::<f64>::zeros(&[1, 2, 2]).unwrap();
        let w = ComplexTensor::<f64>::zeros(&[1, 1, 5, 5]).unwrap();
        let err = conv2d(&z, &w, Conv2dParams { stride: 1, padding: 1, groups: 1 }, ConvMethod::Gauss);
        assert!(matches!(err, Err(CdsError::Shape(_))));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(z), g>_R must equal <z, grad_z>_R and <w, grad_w>_R by linearity.
        let mut rng = Rng::new(8);
        let dot = |a: &ComplexTensor<f64>, b: &ComplexTensor<f64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
        };
        let cases = [
            ([4, 3, 3, 3], Conv2dParams { stride: 2, padding: 1, groups: 1 }),
            ([1, 3, 3, 3], Conv2dParams { stride: 1, padding: 1, groups: 1 }),
            ([3, 1, 2, 2], Conv2dParams { stride: 1, padding: 0, groups: 3 }),
        ];
        for (ws, p) in cases {
            let z = rand_c(&[2, 3, 6, 5], &mut rng);
            let w = rand_c(&ws, &mut rng);
            let y = conv2d(&z, &w, p, ConvMethod::Gauss).unwrap();
            let g = rand_c(y.shape(), &mut rng);
            let (gz, gw) = conv2d_backward(&z, &w, p, &g, true).unwrap();
            let lhs = dot(&y, &g);
            assert!((lhs - dot(&z, &gz.unwrap())).abs() < 1e-10 * lhs.abs().max(1.0), "{ws:?}");
            assert!((lhs - dot(&w, &gw)).abs() < 1e-10 * lhs.abs().max(1.0), "{ws:?}");
        }
    }

    #[test]
    fn real_backward_is_adjoint_of_forward() {
        let mut rng = Rng::new(9);
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        for (ws, p) in [
            ([4, 2, 3, 3], Conv2dParams { stride: 2, padding: 1, groups: 1 }),
            ([2, 1, 3, 3], Conv2dParams { stride: 1, padding: 1, groups: 2 }),
        ] {
            let x = Tensor::from_vec(&[2, 2, 5, 6], rand_c(&[2, 2, 5, 6], &mut rng).re().to_vec()).unwrap();
            let w = Tensor::from_vec(&ws, rand_c(&ws, &mut rng).re().to_vec()).unwrap();
            let y = real_conv2d(&x, &w, None, p).unwrap();
            let g = rand_c(y.shape(), &mut rng).re().to_vec();
            let gt = Tensor::from_vec(y.shape(), g.clone()).unwrap();
            let (gx, gw, gb) = real_conv2d_backward(&x, &w, p, &gt, true).unwrap();
            let lhs = dot(y.data(), &g);
            assert!((lhs - dot(x.data(), gx.unwrap().data())).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - dot(w.data(), gw.data())).abs() < 1e-10 * lhs.abs().max(1.0));
            let per = g.len() / (2 * ws[0]);
            let want: f64 = (0..2).map(|n| g[n * ws[0] * per..n * ws[0] * per + per].iter().sum::<f64>()).sum();
            assert!((gb[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn real_conv_matches_complex_path_on_real_data() {
        let mut rng = Rng::new(3);
        let p = Conv2dParams { stride: 1, padding: 1, groups: 1 };
        let xr = rand_c(&[2, 5, 5], &mut rng);
        let wr = rand_c(&[3, 2, 3, 3], &mut rng);
        let x = Tensor::from_vec(&[2, 5, 5], xr.re().to_vec()).unwrap();
        let w = Tensor::from_vec(&[3, 2, 3, 3], wr.re().to_vec()).unwrap();
        let out = real_conv2d(&x, &w, Some(&[1.0, 0.0, -1.0]), p).unwrap();
        let zc = ComplexTensor::from_real(&x);
        let wc = ComplexTensor::from_real(&w);
        let oracle = conv2d_direct(&zc, &wc, p).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            let bias = [1.0, 0.0, -1.0][i / 25];
            assert!((v - oracle.re()[i] - bias).abs() < 1e-12);
        }
        // One output channel takes the tap-by-tap path.
        let w1 = Tensor::from_vec(&[1, 2, 3, 3], wr.re()[..18].to_vec()).unwrap();
        let out = real_conv2d(&x, &w1, Some(&[0.5]), p).unwrap();
        let oracle = conv2d_direct(&zc, &ComplexTensor::from_real(&w1), p).unwrap();
        for (v, o) in out.data().iter().zip(oracle.re()) {
            assert!((v - o - 0.5).abs() < 1e-12);
        }
    }
}

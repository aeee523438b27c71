//! 3-D convolution over `(batch, frames, channels, height, width)`.
//!
//! Plain direct convolution (no im2col, no FFT): the innermost loop runs
//! along the width axis over contiguous rows so LLVM can vectorize it.
//! Output columns whose window lies fully inside the row take a fused
//! all-taps pass; the few partial-window edge columns are handled one tap at
//! a time. All accumulation orders are fixed functions of the shapes, which
//! keeps results bitwise reproducible from run to run.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy)]
struct ConvGeom {
    b: usize,
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    pad: [usize; 3],
    stride: [usize; 3],
    n_out: usize,
    h_out: usize,
    w_out: usize,
}

fn out_extent(context: &'static str, axis: &'static str, d: usize, k: usize, p: usize, s: usize) -> Result<usize> {
    if s == 0 {
        return Err(TensorError::InvalidArg {
            context,
            what: format!("stride on axis `{axis}` must be >= 1"),
        });
    }
    let padded = d + 2 * p;
    if k == 0 || k > padded {
        return Err(TensorError::InvalidArg {
            context,
            what: format!("kernel {k} exceeds padded input {padded} on axis `{axis}`"),
        });
    }
    Ok((padded - k) / s + 1)
}

impl<E: Element> Graph<E> {
    /// Convolve `x: (b, n, c_in, h, w)` with `weight: (c_out, c_in, kt, kh,
    /// kw)` plus optional per-channel `bias`, with zero padding
    /// `(pt, ph, pw)` and stride `(st, sh, sw)`.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        padding: [usize; 3],
        stride: [usize; 3],
    ) -> Result<NodeId> {
        let (b, n, c_in, h, w) = self.value(x).dims5("conv3d input")?;
        let (c_out, wc_in, kt, kh, kw) = self.value(weight).dims5("conv3d weight")?;
        if wc_in != c_in {
            return Err(TensorError::AxisMismatch {
                context: "conv3d",
                axis: "channels",
                expected: c_in,
                got: wc_in,
            });
        }
        if let Some(bid) = bias {
            let bv = self.value(bid);
            if bv.rank() != 1 || bv.len() != c_out {
                return Err(TensorError::AxisMismatch {
                    context: "conv3d bias",
                    axis: "c_out",
                    expected: c_out,
                    got: bv.len(),
                });
            }
        }
        let n_out = out_extent("conv3d", "frames", n, kt, padding[0], stride[0])?;
        let h_out = out_extent("conv3d", "height", h, kh, padding[1], stride[1])?;
        let w_out = out_extent("conv3d", "width", w, kw, padding[2], stride[2])?;
        let geom = ConvGeom {
            b,
            n,
            c_in,
            h,
            w,
            c_out,
            kt,
            kh,
            kw,
            pad: padding,
            stride,
            n_out,
            h_out,
            w_out,
        };

        let mut y = vec![E::zero(); b * n_out * c_out * h_out * w_out];
        {
            let xd = self.value(x).data();
            let wd = self.value(weight).data();
            let bd: Option<&[E]> = bias.map(|bid| self.value(bid).data());
            forward(geom, xd, wd, bd, &mut y);
        }

        let mut parents = vec![x, weight];
        if let Some(bid) = bias {
            parents.push(bid);
        }
        let backward = if self.any_requires(&parents) {
            Some(Box::new(move |up: &[E], ctx: &crate::graph::OpCtx<'_, E>, sink: &mut crate::graph::GradSink<'_, E>| {
                if sink.wants(x) {
                    let wd = ctx.value(weight).data();
                    let gx = sink.accum(x);
                    backward_input(geom, up, wd, gx);
                }
                if sink.wants(weight) {
                    let xd = ctx.value(x).data();
                    let gw = sink.accum(weight);
                    backward_weight(geom, up, xd, gw);
                }
                if let Some(bid) = bias {
                    if sink.wants(bid) {
                        let gb = sink.accum(bid);
                        backward_bias(geom, up, gb);
                    }
                }
            }) as crate::graph::BackwardFn<E>)
        } else {
            None
        };
        Ok(self.push_op(
            "conv3d",
            Tensor::new(vec![b, n_out, c_out, h_out, w_out], y)?,
            &parents,
            backward,
        ))
    }
}

/// Valid output-column range `[lo, hi)` for one kernel column, plus the input
/// column of the first valid tap.
#[inline]
fn col_range(g: &ConvGeom, kwi: usize) -> Option<(usize, usize, usize)> {
    let sw = g.stride[2];
    let off = kwi as isize - g.pad[2] as isize; // input col = wo*sw + off
    let lo = if off < 0 {
        ((-off) as usize + sw - 1) / sw
    } else {
        0
    };
    if off > (g.w - 1) as isize {
        return None;
    }
    let hi = (((g.w - 1) as isize - off) as usize / sw + 1).min(g.w_out);
    if lo >= hi {
        return None;
    }
    let x_start = (lo * sw) as isize + off;
    Some((lo, hi, x_start as usize))
}

/// Width-axis tap geometry, computed once per convolution: the valid output
/// range per kernel column plus the interior range where every column is
/// valid at once, so the inner loops never re-derive padding arithmetic.
struct WidthPlan {
    /// `(lo, hi, x_start)` per kernel column; `lo == hi` marks a column with
    /// no valid output at all.
    cols: Vec<(usize, usize, usize)>,
    int_lo: usize,
    int_hi: usize,
    sw: usize,
    pw: usize,
}

impl WidthPlan {
    fn new(g: &ConvGeom) -> Self {
        let mut cols = Vec::with_capacity(g.kw);
        let mut int_lo = 0usize;
        let mut int_hi = g.w_out;
        for kwi in 0..g.kw {
            match col_range(g, kwi) {
                Some((lo, hi, xs)) => {
                    int_lo = int_lo.max(lo);
                    int_hi = int_hi.min(hi);
                    cols.push((lo, hi, xs));
                }
                None => {
                    int_hi = 0;
                    cols.push((0, 0, 0));
                }
            }
        }
        if int_lo > int_hi {
            int_hi = int_lo;
        }
        Self {
            cols,
            int_lo,
            int_hi,
            sw: g.stride[2],
            pw: g.pad[2],
        }
    }

    /// Transposed plan: scattering `up` rows into input-gradient rows with
    /// unit width stride is itself a correlation of `up` with the reversed
    /// kernel row, over swapped extents and mirrored padding.
    fn transposed(g: &ConvGeom) -> Self {
        let mut gt = *g;
        gt.w = g.w_out;
        gt.w_out = g.w;
        gt.pad[2] = g.kw - 1 - g.pad[2];
        gt.stride[2] = 1;
        Self::new(&gt)
    }
}

/// `acc[lo..hi] += xrow[xs + i*sw] * wgt` — one kernel column over one row.
#[inline]
fn row_tap<E: Element>(acc: &mut [E], xrow: &[E], wgt: E, lo: usize, hi: usize, xs: usize, sw: usize) {
    if sw == 1 {
        let xsl = &xrow[xs..xs + (hi - lo)];
        for (av, xv) in acc[lo..hi].iter_mut().zip(xsl) {
            *av = *av + *xv * wgt;
        }
    } else {
        let xit = xrow[xs..].iter().step_by(sw);
        for (av, xv) in acc[lo..hi].iter_mut().zip(xit) {
            *av = *av + *xv * wgt;
        }
    }
}

/// One output row against one kernel row: the full-window interior takes a
/// fused pass over all taps, the partial-window edge columns go tap by tap.
#[inline]
fn row_fused<E: Element>(acc: &mut [E], xrow: &[E], wrow: &[E], wp: &WidthPlan) {
    for (kwi, &(lo, hi, xs)) in wp.cols.iter().enumerate() {
        let e = hi.min(wp.int_lo);
        if lo < e {
            row_tap(acc, xrow, wrow[kwi], lo, e, xs, wp.sw);
        }
    }
    let n = wp.int_hi - wp.int_lo;
    if n > 0 {
        let xbase = wp.int_lo * wp.sw - wp.pw;
        match (wrow.len(), wp.sw) {
            (3, 1) => {
                let xs = &xrow[xbase..xbase + n + 2];
                let aseg = &mut acc[wp.int_lo..wp.int_hi];
                let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
                for i in 0..n {
                    aseg[i] = aseg[i] + xs[i] * w0 + xs[i + 1] * w1 + xs[i + 2] * w2;
                }
            }
            (3, sw) => {
                let xs = &xrow[xbase..];
                let aseg = &mut acc[wp.int_lo..wp.int_hi];
                let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
                for i in 0..n {
                    let b = i * sw;
                    aseg[i] = aseg[i] + xs[b] * w0 + xs[b + 1] * w1 + xs[b + 2] * w2;
                }
            }
            (_, sw) => {
                let aseg = &mut acc[wp.int_lo..wp.int_hi];
                for i in 0..n {
                    let b = xbase + i * sw;
                    let mut t = E::zero();
                    for (kwi, &wgt) in wrow.iter().enumerate() {
                        t = t + xrow[b + kwi] * wgt;
                    }
                    aseg[i] = aseg[i] + t;
                }
            }
        }
    }
    for (kwi, &(lo, hi, xs)) in wp.cols.iter().enumerate() {
        let s = lo.max(wp.int_hi);
        if s < hi {
            row_tap(acc, xrow, wrow[kwi], s, hi, xs + (s - lo) * wp.sw, wp.sw);
        }
    }
}

/// Channel count from which the channels-last path pays off; below it the
/// per-output dot is too short to vectorize and the row path wins.
const CL_MIN_C: usize = 8;
/// Lane count of the split accumulator. Fixed regardless of element type so
/// the summation order (and therefore the result) never depends on the
/// target's vector width.
const LANES: usize = 8;

/// Repack `(b, n, c, h, w)` activations as `(b, n, h, w, c)` so channels are
/// contiguous.
fn pack_channels_last<E: Element>(g: &ConvGeom, xd: &[E]) -> Vec<E> {
    let plane = g.h * g.w;
    let mut xt = vec![E::zero(); xd.len()];
    let mut dst = 0;
    for bt in 0..g.b * g.n {
        let src = &xd[bt * g.c_in * plane..][..g.c_in * plane];
        for p in 0..plane {
            for ci in 0..g.c_in {
                xt[dst] = src[ci * plane + p];
                dst += 1;
            }
        }
    }
    xt
}

/// Repack `(c_out, c_in, kt, kh, kw)` weights as `(c_out, kt, kh, kw, c_in)`.
fn pack_weights_last<E: Element>(g: &ConvGeom, wd: &[E]) -> Vec<E> {
    let k_all = g.kt * g.kh * g.kw;
    let mut wt = vec![E::zero(); wd.len()];
    for co in 0..g.c_out {
        let src = &wd[co * g.c_in * k_all..][..g.c_in * k_all];
        let dst = &mut wt[co * k_all * g.c_in..][..k_all * g.c_in];
        for ci in 0..g.c_in {
            for kk in 0..k_all {
                dst[kk * g.c_in + ci] = src[ci * k_all + kk];
            }
        }
    }
    wt
}

/// `acc[l] += a[i]*b[i]` with `i` spread over lanes in a fixed pattern. The
/// lanes are independent, so this is a plain elementwise loop the compiler
/// can vectorize without any reassociation license.
#[inline]
fn lane_dot<E: Element>(acc: &mut [E; LANES], a: &[E], b: &[E]) {
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (a8, b8) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + a8[l] * b8[l];
        }
    }
    for (l, (av, bv)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] = acc[l] + *av * *bv;
    }
}

/// `dst += src * scale`, elementwise.
#[inline]
fn lane_axpy<E: Element>(dst: &mut [E], scale: E, src: &[E]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s * scale;
    }
}

/// Fixed pairwise fold of the lane accumulator.
#[inline]
fn fold_lanes<E: Element>(acc: &[E; LANES]) -> E {
    let q0 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let q1 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    q0 + q1
}

/// Output-column blocking width: full-window columns are processed in groups
/// of four so each weight chunk is loaded once per group. The blocked loops
/// accumulate in a fixed order of their own, so results stay bitwise
/// reproducible from run to run.
const WBLK: usize = 4;

/// `lane_dot` against four channel slabs spaced `step` apart, sharing each
/// weight chunk.
#[inline]
fn lane_dot_x4<E: Element>(acc: &mut [[E; LANES]; WBLK], xs: &[E], w: &[E], step: usize) {
    let c = w.len();
    let x0 = &xs[..c];
    let x1 = &xs[step..][..c];
    let x2 = &xs[2 * step..][..c];
    let x3 = &xs[3 * step..][..c];
    let mut off = 0;
    while off + LANES <= c {
        let w8 = &w[off..off + LANES];
        for l in 0..LANES {
            acc[0][l] = acc[0][l] + x0[off + l] * w8[l];
        }
        for l in 0..LANES {
            acc[1][l] = acc[1][l] + x1[off + l] * w8[l];
        }
        for l in 0..LANES {
            acc[2][l] = acc[2][l] + x2[off + l] * w8[l];
        }
        for l in 0..LANES {
            acc[3][l] = acc[3][l] + x3[off + l] * w8[l];
        }
        off += LANES;
    }
    let mut li = 0;
    while off < c {
        acc[0][li] = acc[0][li] + x0[off] * w[off];
        acc[1][li] = acc[1][li] + x1[off] * w[off];
        acc[2][li] = acc[2][li] + x2[off] * w[off];
        acc[3][li] = acc[3][li] + x3[off] * w[off];
        off += 1;
        li += 1;
    }
}

/// Four `lane_axpy` calls into slabs spaced `step` apart, sharing each
/// source chunk.
#[inline]
fn lane_axpy_x4<E: Element>(dst: &mut [E], scales: [E; WBLK], src: &[E], step: usize) {
    let c = src.len();
    let (s0, r) = dst.split_at_mut(step);
    let (s1, r) = r.split_at_mut(step);
    let (s2, s3) = r.split_at_mut(step);
    let d0 = &mut s0[..c];
    let d1 = &mut s1[..c];
    let d2 = &mut s2[..c];
    let d3 = &mut s3[..c];
    for (d, s) in d0.iter_mut().zip(src) {
        *d = *d + *s * scales[0];
    }
    for (d, s) in d1.iter_mut().zip(src) {
        *d = *d + *s * scales[1];
    }
    for (d, s) in d2.iter_mut().zip(src) {
        *d = *d + *s * scales[2];
    }
    for (d, s) in d3.iter_mut().zip(src) {
        *d = *d + *s * scales[3];
    }
}

/// Accumulate four scaled channel slabs into one weight-gradient slab, each
/// element taking its four contributions in ascending column order — the
/// same order as four separate `lane_axpy` calls.
#[inline]
fn lane_waccum_x4<E: Element>(gw: &mut [E], xs: &[E], scales: [E; WBLK], step: usize) {
    let c = gw.len();
    let x0 = &xs[..c];
    let x1 = &xs[step..][..c];
    let x2 = &xs[2 * step..][..c];
    let x3 = &xs[3 * step..][..c];
    for i in 0..c {
        let mut t = gw[i];
        t = t + scales[0] * x0[i];
        t = t + scales[1] * x1[i];
        t = t + scales[2] * x2[i];
        t = t + scales[3] * x3[i];
        gw[i] = t;
    }
}

/// Full-window output-column range for the channels-last loops: every kernel
/// column is valid for `wo` in `[lo, hi)`.
#[inline]
fn interior_cols(g: &ConvGeom) -> (usize, usize) {
    let sw = g.stride[2];
    let lo = (g.pad[2] + sw - 1) / sw;
    let span = g.w + g.pad[2];
    let hi = if span >= g.kw {
        ((span - g.kw) / sw + 1).min(g.w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn forward_cl<E: Element>(g: ConvGeom, xd: &[E], wd: &[E], bd: Option<&[E]>, y: &mut [E]) {
    let xt = pack_channels_last(&g, xd);
    let wt = pack_weights_last(&g, wd);
    let c = g.c_in;
    let row_t = g.w * c;
    let frame_t = g.h * row_t;
    let k_all = g.kt * g.kh * g.kw;
    let y_plane = g.h_out * g.w_out;
    let (sh, sw) = (g.stride[1], g.stride[2]);
    let (ph, pw) = (g.pad[1], g.pad[2]);
    let (int_lo, int_hi) = interior_cols(&g);
    for bi in 0..g.b {
        let xb = &xt[bi * g.n * frame_t..][..g.n * frame_t];
        let yb = &mut y[bi * g.n_out * g.c_out * y_plane..][..g.n_out * g.c_out * y_plane];
        for noi in 0..g.n_out {
            let t0 = (noi * g.stride[0]) as isize - g.pad[0] as isize;
            for coi in 0..g.c_out {
                let wco = &wt[coi * k_all * c..][..k_all * c];
                let b0 = bd.map_or(E::zero(), |b| b[coi]);
                let yblk = &mut yb[(noi * g.c_out + coi) * y_plane..][..y_plane];
                for hoi in 0..g.h_out {
                    let h0 = (hoi * sh) as isize - ph as isize;
                    let mut wo = 0;
                    while wo < g.w_out {
                        if wo >= int_lo && wo + WBLK <= int_hi {
                            let xs0 = wo * sw - pw;
                            let mut acc = [[E::zero(); LANES]; WBLK];
                            for kti in 0..g.kt {
                                let ti = t0 + kti as isize;
                                if ti < 0 || ti >= g.n as isize {
                                    continue;
                                }
                                let xf = &xb[ti as usize * frame_t..][..frame_t];
                                for khi in 0..g.kh {
                                    let hi = h0 + khi as isize;
                                    if hi < 0 || hi >= g.h as isize {
                                        continue;
                                    }
                                    let xrow = &xf[hi as usize * row_t..][..row_t];
                                    let wrow = &wco[(kti * g.kh + khi) * g.kw * c..][..g.kw * c];
                                    for kwi in 0..g.kw {
                                        let xs = &xrow[(xs0 + kwi) * c..][..(WBLK - 1) * sw * c + c];
                                        lane_dot_x4(&mut acc, xs, &wrow[kwi * c..][..c], sw * c);
                                    }
                                }
                            }
                            for (j, a) in acc.iter().enumerate() {
                                yblk[hoi * g.w_out + wo + j] = b0 + fold_lanes(a);
                            }
                            wo += WBLK;
                        } else {
                            let w0 = (wo * sw) as isize - pw as isize;
                            let k_lo = (-w0).max(0) as usize;
                            let k_hi = g.kw.min(((g.w as isize - w0).max(0)) as usize);
                            let mut acc = [E::zero(); LANES];
                            for kti in 0..g.kt {
                                let ti = t0 + kti as isize;
                                if ti < 0 || ti >= g.n as isize {
                                    continue;
                                }
                                let xf = &xb[ti as usize * frame_t..][..frame_t];
                                for khi in 0..g.kh {
                                    let hi = h0 + khi as isize;
                                    if hi < 0 || hi >= g.h as isize {
                                        continue;
                                    }
                                    let xrow = &xf[hi as usize * row_t..][..row_t];
                                    let wrow = &wco[(kti * g.kh + khi) * g.kw * c..][..g.kw * c];
                                    for kwi in k_lo..k_hi {
                                        let xi = (w0 + kwi as isize) as usize;
                                        lane_dot(
                                            &mut acc,
                                            &xrow[xi * c..][..c],
                                            &wrow[kwi * c..][..c],
                                        );
                                    }
                                }
                            }
                            yblk[hoi * g.w_out + wo] = b0 + fold_lanes(&acc);
                            wo += 1;
                        }
                    }
                }
            }
        }
    }
}

fn forward<E: Element>(g: ConvGeom, xd: &[E], wd: &[E], bd: Option<&[E]>, y: &mut [E]) {
    if g.c_in >= CL_MIN_C {
        return forward_cl(g, xd, wd, bd, y);
    }
    let plane = g.h * g.w;
    let x_frame = g.c_in * plane;
    let y_plane = g.h_out * g.w_out;
    let wp = WidthPlan::new(&g);
    for bi in 0..g.b {
        let xb = &xd[bi * g.n * x_frame..][..g.n * x_frame];
        let yb = &mut y[bi * g.n_out * g.c_out * y_plane..][..g.n_out * g.c_out * y_plane];
        for noi in 0..g.n_out {
            let t0 = (noi * g.stride[0]) as isize - g.pad[0] as isize;
            for coi in 0..g.c_out {
                let yblk = &mut yb[(noi * g.c_out + coi) * y_plane..][..y_plane];
                let b0 = bd.map_or(E::zero(), |b| b[coi]);
                yblk.fill(b0);
                for cii in 0..g.c_in {
                    for kti in 0..g.kt {
                        let ti = t0 + kti as isize;
                        if ti < 0 || ti >= g.n as isize {
                            continue;
                        }
                        let xplane = &xb[(ti as usize * g.c_in + cii) * plane..][..plane];
                        let wbase = ((coi * g.c_in + cii) * g.kt + kti) * g.kh * g.kw;
                        for khi in 0..g.kh {
                            let wrow = &wd[wbase + khi * g.kw..][..g.kw];
                            for hoi in 0..g.h_out {
                                let hi = (hoi * g.stride[1]) as isize - g.pad[1] as isize
                                    + khi as isize;
                                if hi < 0 || hi >= g.h as isize {
                                    continue;
                                }
                                let xrow = &xplane[hi as usize * g.w..][..g.w];
                                let yrow = &mut yblk[hoi * g.w_out..][..g.w_out];
                                row_fused(yrow, xrow, wrow, &wp);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn backward_input_cl<E: Element>(g: ConvGeom, up: &[E], wd: &[E], gx: &mut [E]) {
    let wt = pack_weights_last(&g, wd);
    let c = g.c_in;
    let row_t = g.w * c;
    let frame_t = g.h * row_t;
    let k_all = g.kt * g.kh * g.kw;
    let y_plane = g.h_out * g.w_out;
    let (sh, sw) = (g.stride[1], g.stride[2]);
    let (ph, pw) = (g.pad[1], g.pad[2]);
    let (int_lo, int_hi) = interior_cols(&g);
    let mut gxt = vec![E::zero(); g.b * g.n * frame_t];
    for bi in 0..g.b {
        let gxb = &mut gxt[bi * g.n * frame_t..][..g.n * frame_t];
        let ub = &up[bi * g.n_out * g.c_out * y_plane..][..g.n_out * g.c_out * y_plane];
        for noi in 0..g.n_out {
            let t0 = (noi * g.stride[0]) as isize - g.pad[0] as isize;
            for coi in 0..g.c_out {
                let wco = &wt[coi * k_all * c..][..k_all * c];
                let ublk = &ub[(noi * g.c_out + coi) * y_plane..][..y_plane];
                for hoi in 0..g.h_out {
                    let h0 = (hoi * sh) as isize - ph as isize;
                    let urow = &ublk[hoi * g.w_out..][..g.w_out];
                    let mut wo = 0;
                    while wo < g.w_out {
                        if wo >= int_lo && wo + WBLK <= int_hi {
                            let us = [urow[wo], urow[wo + 1], urow[wo + 2], urow[wo + 3]];
                            let xs0 = wo * sw - pw;
                            for kti in 0..g.kt {
                                let ti = t0 + kti as isize;
                                if ti < 0 || ti >= g.n as isize {
                                    continue;
                                }
                                let gxf = &mut gxb[ti as usize * frame_t..][..frame_t];
                                for khi in 0..g.kh {
                                    let hi = h0 + khi as isize;
                                    if hi < 0 || hi >= g.h as isize {
                                        continue;
                                    }
                                    let gxrow = &mut gxf[hi as usize * row_t..][..row_t];
                                    let wrow = &wco[(kti * g.kh + khi) * g.kw * c..][..g.kw * c];
                                    for kwi in 0..g.kw {
                                        let gxs = &mut gxrow[(xs0 + kwi) * c..]
                                            [..(WBLK - 1) * sw * c + c];
                                        lane_axpy_x4(gxs, us, &wrow[kwi * c..][..c], sw * c);
                                    }
                                }
                            }
                            wo += WBLK;
                        } else {
                            let u = urow[wo];
                            let w0 = (wo * sw) as isize - pw as isize;
                            let k_lo = (-w0).max(0) as usize;
                            let k_hi = g.kw.min(((g.w as isize - w0).max(0)) as usize);
                            for kti in 0..g.kt {
                                let ti = t0 + kti as isize;
                                if ti < 0 || ti >= g.n as isize {
                                    continue;
                                }
                                let gxf = &mut gxb[ti as usize * frame_t..][..frame_t];
                                for khi in 0..g.kh {
                                    let hi = h0 + khi as isize;
                                    if hi < 0 || hi >= g.h as isize {
                                        continue;
                                    }
                                    let gxrow = &mut gxf[hi as usize * row_t..][..row_t];
                                    let wrow = &wco[(kti * g.kh + khi) * g.kw * c..][..g.kw * c];
                                    for kwi in k_lo..k_hi {
                                        let xi = (w0 + kwi as isize) as usize;
                                        lane_axpy(
                                            &mut gxrow[xi * c..][..c],
                                            u,
                                            &wrow[kwi * c..][..c],
                                        );
                                    }
                                }
                            }
                            wo += 1;
                        }
                    }
                }
            }
        }
    }
    // Fold the channels-last scratch back into the (b, n, c, h, w) gradient.
    let plane = g.h * g.w;
    for bt in 0..g.b * g.n {
        let src = &gxt[bt * frame_t..][..frame_t];
        let dst = &mut gx[bt * g.c_in * plane..][..g.c_in * plane];
        for p in 0..plane {
            for ci in 0..c {
                dst[ci * plane + p] = dst[ci * plane + p] + src[p * c + ci];
            }
        }
    }
}

fn backward_input<E: Element>(g: ConvGeom, up: &[E], wd: &[E], gx: &mut [E]) {
    if g.c_in >= CL_MIN_C {
        return backward_input_cl(g, up, wd, gx);
    }
    let plane = g.h * g.w;
    let x_frame = g.c_in * plane;
    let y_plane = g.h_out * g.w_out;
    let sw = g.stride[2];
    let wp = WidthPlan::new(&g);
    let wp_t = WidthPlan::transposed(&g);
    let mut wrev = vec![E::zero(); g.kw];
    for bi in 0..g.b {
        let gxb = &mut gx[bi * g.n * x_frame..][..g.n * x_frame];
        let ub = &up[bi * g.n_out * g.c_out * y_plane..][..g.n_out * g.c_out * y_plane];
        for noi in 0..g.n_out {
            let t0 = (noi * g.stride[0]) as isize - g.pad[0] as isize;
            for coi in 0..g.c_out {
                let ublk = &ub[(noi * g.c_out + coi) * y_plane..][..y_plane];
                for cii in 0..g.c_in {
                    for kti in 0..g.kt {
                        let ti = t0 + kti as isize;
                        if ti < 0 || ti >= g.n as isize {
                            continue;
                        }
                        let gxplane = &mut gxb[(ti as usize * g.c_in + cii) * plane..][..plane];
                        let wbase = ((coi * g.c_in + cii) * g.kt + kti) * g.kh * g.kw;
                        for khi in 0..g.kh {
                            let wrow = &wd[wbase + khi * g.kw..][..g.kw];
                            if sw == 1 {
                                for (rv, &wv) in wrev.iter_mut().zip(wrow.iter().rev()) {
                                    *rv = wv;
                                }
                            }
                            for hoi in 0..g.h_out {
                                let hi = (hoi * g.stride[1]) as isize - g.pad[1] as isize
                                    + khi as isize;
                                if hi < 0 || hi >= g.h as isize {
                                    continue;
                                }
                                let gxrow = &mut gxplane[hi as usize * g.w..][..g.w];
                                let urow = &ublk[hoi * g.w_out..][..g.w_out];
                                if sw == 1 {
                                    row_fused(gxrow, urow, &wrev, &wp_t);
                                } else {
                                    for (kwi, &wgt) in wrow.iter().enumerate() {
                                        let (lo, hi_w, xs) = wp.cols[kwi];
                                        if lo >= hi_w {
                                            continue;
                                        }
                                        let git = gxrow[xs..].iter_mut().step_by(sw);
                                        for (gv, uv) in git.zip(&urow[lo..hi_w]) {
                                            *gv = *gv + *uv * wgt;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `Σ urow[wo] * xrow[xs + (wo-lo)*sw]` over `wo` in `[lo, hi)`.
#[inline]
fn dot_tap<E: Element>(urow: &[E], xrow: &[E], lo: usize, hi: usize, xs: usize, sw: usize) -> E {
    let mut acc = E::zero();
    if sw == 1 {
        let xsl = &xrow[xs..xs + (hi - lo)];
        for (uv, xv) in urow[lo..hi].iter().zip(xsl) {
            acc = acc + *uv * *xv;
        }
    } else {
        let xit = xrow[xs..].iter().step_by(sw);
        for (uv, xv) in urow[lo..hi].iter().zip(xit) {
            acc = acc + *uv * *xv;
        }
    }
    acc
}

fn backward_weight_cl<E: Element>(g: ConvGeom, up: &[E], xd: &[E], gw: &mut [E]) {
    let xt = pack_channels_last(&g, xd);
    let c = g.c_in;
    let row_t = g.w * c;
    let frame_t = g.h * row_t;
    let k_all = g.kt * g.kh * g.kw;
    let y_plane = g.h_out * g.w_out;
    let (sh, sw) = (g.stride[1], g.stride[2]);
    let (ph, pw) = (g.pad[1], g.pad[2]);
    let (int_lo, int_hi) = interior_cols(&g);
    let mut gwt = vec![E::zero(); g.c_out * k_all * c];
    for bi in 0..g.b {
        let xb = &xt[bi * g.n * frame_t..][..g.n * frame_t];
        let ub = &up[bi * g.n_out * g.c_out * y_plane..][..g.n_out * g.c_out * y_plane];
        for noi in 0..g.n_out {
            let t0 = (noi * g.stride[0]) as isize - g.pad[0] as isize;
            for coi in 0..g.c_out {
                let gwc = &mut gwt[coi * k_all * c..][..k_all * c];
                let ublk = &ub[(noi * g.c_out + coi) * y_plane..][..y_plane];
                for hoi in 0..g.h_out {
                    let h0 = (hoi * sh) as isize - ph as isize;
                    let urow = &ublk[hoi * g.w_out..][..g.w_out];
                    let mut wo = 0;
                    while wo < g.w_out {
                        if wo >= int_lo && wo + WBLK <= int_hi {
                            let us = [urow[wo], urow[wo + 1], urow[wo + 2], urow[wo + 3]];
                            let xs0 = wo * sw - pw;
                            for kti in 0..g.kt {
                                let ti = t0 + kti as isize;
                                if ti < 0 || ti >= g.n as isize {
                                    continue;
                                }
                                let xf = &xb[ti as usize * frame_t..][..frame_t];
                                for khi in 0..g.kh {
                                    let hi = h0 + khi as isize;
                                    if hi < 0 || hi >= g.h as isize {
                                        continue;
                                    }
                                    let xrow = &xf[hi as usize * row_t..][..row_t];
                                    let grow =
                                        &mut gwc[(kti * g.kh + khi) * g.kw * c..][..g.kw * c];
                                    for kwi in 0..g.kw {
                                        let xs = &xrow[(xs0 + kwi) * c..]
                                            [..(WBLK - 1) * sw * c + c];
                                        lane_waccum_x4(&mut grow[kwi * c..][..c], xs, us, sw * c);
                                    }
                                }
                            }
                            wo += WBLK;
                        } else {
                            let u = urow[wo];
                            let w0 = (wo * sw) as isize - pw as isize;
                            let k_lo = (-w0).max(0) as usize;
                            let k_hi = g.kw.min(((g.w as isize - w0).max(0)) as usize);
                            for kti in 0..g.kt {
                                let ti = t0 + kti as isize;
                                if ti < 0 || ti >= g.n as isize {
                                    continue;
                                }
                                let xf = &xb[ti as usize * frame_t..][..frame_t];
                                for khi in 0..g.kh {
                                    let hi = h0 + khi as isize;
                                    if hi < 0 || hi >= g.h as isize {
                                        continue;
                                    }
                                    let xrow = &xf[hi as usize * row_t..][..row_t];
                                    let grow =
                                        &mut gwc[(kti * g.kh + khi) * g.kw * c..][..g.kw * c];
                                    for kwi in k_lo..k_hi {
                                        let xi = (w0 + kwi as isize) as usize;
                                        lane_axpy(
                                            &mut grow[kwi * c..][..c],
                                            u,
                                            &xrow[xi * c..][..c],
                                        );
                                    }
                                }
                            }
                            wo += 1;
                        }
                    }
                }
            }
        }
    }
    // Fold the channels-last scratch back into (c_out, c_in, kt, kh, kw).
    for co in 0..g.c_out {
        let src = &gwt[co * k_all * c..][..k_all * c];
        let dst = &mut gw[co * c * k_all..][..c * k_all];
        for kk in 0..k_all {
            for ci in 0..c {
                dst[ci * k_all + kk] = dst[ci * k_all + kk] + src[kk * c + ci];
            }
        }
    }
}

fn backward_weight<E: Element>(g: ConvGeom, up: &[E], xd: &[E], gw: &mut [E]) {
    if g.c_in >= CL_MIN_C {
        return backward_weight_cl(g, up, xd, gw);
    }
    let plane = g.h * g.w;
    let x_frame = g.c_in * plane;
    let y_plane = g.h_out * g.w_out;
    let sw = g.stride[2];
    let wp = WidthPlan::new(&g);
    let fuse3 = g.kw == 3 && sw == 1;
    for bi in 0..g.b {
        let xb = &xd[bi * g.n * x_frame..][..g.n * x_frame];
        let ub = &up[bi * g.n_out * g.c_out * y_plane..][..g.n_out * g.c_out * y_plane];
        for noi in 0..g.n_out {
            let t0 = (noi * g.stride[0]) as isize - g.pad[0] as isize;
            for coi in 0..g.c_out {
                let ublk = &ub[(noi * g.c_out + coi) * y_plane..][..y_plane];
                for cii in 0..g.c_in {
                    for kti in 0..g.kt {
                        let ti = t0 + kti as isize;
                        if ti < 0 || ti >= g.n as isize {
                            continue;
                        }
                        let xplane = &xb[(ti as usize * g.c_in + cii) * plane..][..plane];
                        let wbase = ((coi * g.c_in + cii) * g.kt + kti) * g.kh * g.kw;
                        for khi in 0..g.kh {
                            for hoi in 0..g.h_out {
                                let hi = (hoi * g.stride[1]) as isize - g.pad[1] as isize
                                    + khi as isize;
                                if hi < 0 || hi >= g.h as isize {
                                    continue;
                                }
                                let xrow = &xplane[hi as usize * g.w..][..g.w];
                                let urow = &ublk[hoi * g.w_out..][..g.w_out];
                                let wslot = &mut gw[wbase + khi * g.kw..][..g.kw];
                                if fuse3 {
                                    // One pass over the interior feeding all
                                    // three tap sums, then the edge columns.
                                    let n = wp.int_hi - wp.int_lo;
                                    let (mut a0, mut a1, mut a2) =
                                        (E::zero(), E::zero(), E::zero());
                                    if n > 0 {
                                        let xseg = &xrow[wp.int_lo - wp.pw..][..n + 2];
                                        let useg = &urow[wp.int_lo..wp.int_hi];
                                        for i in 0..n {
                                            let u = useg[i];
                                            a0 = a0 + u * xseg[i];
                                            a1 = a1 + u * xseg[i + 1];
                                            a2 = a2 + u * xseg[i + 2];
                                        }
                                    }
                                    let mut acc = [a0, a1, a2];
                                    for (kwi, &(lo, hi_w, xs)) in wp.cols.iter().enumerate() {
                                        let e = hi_w.min(wp.int_lo);
                                        if lo < e {
                                            acc[kwi] =
                                                acc[kwi] + dot_tap(urow, xrow, lo, e, xs, 1);
                                        }
                                        let s = lo.max(wp.int_hi);
                                        if s < hi_w {
                                            acc[kwi] = acc[kwi]
                                                + dot_tap(urow, xrow, s, hi_w, xs + (s - lo), 1);
                                        }
                                    }
                                    for (wv, av) in wslot.iter_mut().zip(acc) {
                                        *wv = *wv + av;
                                    }
                                } else {
                                    for (kwi, &(lo, hi_w, xs)) in wp.cols.iter().enumerate() {
                                        if lo >= hi_w {
                                            continue;
                                        }
                                        let acc = dot_tap(urow, xrow, lo, hi_w, xs, sw);
                                        wslot[kwi] = wslot[kwi] + acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn backward_bias<E: Element>(g: ConvGeom, up: &[E], gb: &mut [E]) {
    let y_plane = g.h_out * g.w_out;
    for bi in 0..g.b {
        for noi in 0..g.n_out {
            for coi in 0..g.c_out {
                let base = ((bi * g.n_out + noi) * g.c_out + coi) * y_plane;
                let mut acc = E::zero();
                for &u in &up[base..base + y_plane] {
                    acc = acc + u;
                }
                gb[coi] = gb[coi] + acc;
            }
        }
    }
}

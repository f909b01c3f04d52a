//! Direct 2D convolution (cross-correlation) with stride, zero padding and
//! channel groups.
//!
//! x: [B, Cin, H, W], w: [Cout, Cin/groups, Kh, Kw], out: [B, Cout, Ho, Wo].
//! Forward parallelism is one output plane per work item; gradients split
//! the same way over their own output buffers. Per-cell accumulation order
//! is (channel, tap row, tap col) in every path.

use crate::parallel::for_each_chunk_mut;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

pub fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output positions `o` with `0 <= o*stride + tap - pad < input`, as an
/// inclusive-exclusive range clipped to `0..out_len`.
pub(crate) fn tap_range(
    input: usize,
    out_len: usize,
    stride: usize,
    pad: usize,
    tap: usize,
) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap + stride - 1) / stride } else { 0 };
    if tap > input - 1 + pad {
        return (0, 0);
    }
    let hi = ((input - 1 + pad - tap) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    xs: (usize, usize, usize, usize),
    ks: (usize, usize, usize),
    spec: Conv2dSpec,
    out: &mut [T],
) {
    let (batch, cin, h, wd) = xs;
    let (cout, kh, kw) = ks;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let ho = out_dim(h, kh, sh, ph);
    let wo = out_dim(wd, kw, sw, pw);
    debug_assert_eq!(out.len(), batch * cout * ho * wo);
    for_each_chunk_mut(out, ho * wo, |plane, out_plane| {
        let b = plane / cout;
        let oc = plane % cout;
        let group = oc / cout_g;
        let init = bias.map_or(T::zero(), |bv| bv[oc]);
        for v in out_plane.iter_mut() {
            *v = init;
        }
        for ic_l in 0..cin_g {
            let ic = group * cin_g + ic_l;
            let x_plane = &x[(b * cin + ic) * h * wd..(b * cin + ic + 1) * h * wd];
            for khi in 0..kh {
                let (oh_lo, oh_hi) = tap_range(h, ho, sh, ph, khi);
                for kwi in 0..kw {
                    let wv = w[((oc * cin_g + ic_l) * kh + khi) * kw + kwi];
                    let (ow_lo, ow_hi) = tap_range(wd, wo, sw, pw, kwi);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * sh + khi - ph;
                        let x_row = &x_plane[ih * wd..(ih + 1) * wd];
                        let out_row = &mut out_plane[oh * wo..(oh + 1) * wo];
                        if sw == 1 {
                            let x_off = ow_lo + kwi - pw;
                            let src = &x_row[x_off..x_off + (ow_hi - ow_lo)];
                            for (o, &xv) in out_row[ow_lo..ow_hi].iter_mut().zip(src.iter()) {
                                *o += wv * xv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                out_row[ow] += wv * x_row[ow * sw + kwi - pw];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_bwd_input<T: Scalar>(
    g_out: &[T],
    w: &[T],
    xs: (usize, usize, usize, usize),
    ks: (usize, usize, usize),
    spec: Conv2dSpec,
    dx: &mut [T],
) {
    let (batch, cin, h, wd) = xs;
    let (cout, kh, kw) = ks;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let ho = out_dim(h, kh, sh, ph);
    let wo = out_dim(wd, kw, sw, pw);
    debug_assert_eq!(g_out.len(), batch * cout * ho * wo);
    for_each_chunk_mut(dx, h * wd, |plane, dx_plane| {
        let b = plane / cin;
        let ic = plane % cin;
        let group = ic / cin_g;
        let ic_l = ic % cin_g;
        for v in dx_plane.iter_mut() {
            *v = T::zero();
        }
        for oc_l in 0..cout_g {
            let oc = group * cout_g + oc_l;
            let g_plane = &g_out[(b * cout + oc) * ho * wo..(b * cout + oc + 1) * ho * wo];
            for khi in 0..kh {
                let (oh_lo, oh_hi) = tap_range(h, ho, sh, ph, khi);
                for kwi in 0..kw {
                    let wv = w[((oc * cin_g + ic_l) * kh + khi) * kw + kwi];
                    let (ow_lo, ow_hi) = tap_range(wd, wo, sw, pw, kwi);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * sh + khi - ph;
                        let g_row = &g_plane[oh * wo..(oh + 1) * wo];
                        let dx_row = &mut dx_plane[ih * wd..(ih + 1) * wd];
                        if sw == 1 {
                            let x_off = ow_lo + kwi - pw;
                            let dst = &mut dx_row[x_off..x_off + (ow_hi - ow_lo)];
                            for (d, &gv) in dst.iter_mut().zip(g_row[ow_lo..ow_hi].iter()) {
                                *d += wv * gv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                dx_row[ow * sw + kwi - pw] += wv * g_row[ow];
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_bwd_weight<T: Scalar>(
    g_out: &[T],
    x: &[T],
    xs: (usize, usize, usize, usize),
    ks: (usize, usize, usize),
    spec: Conv2dSpec,
    dw: &mut [T],
) {
    let (batch, cin, h, wd) = xs;
    let (cout, kh, kw) = ks;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let ho = out_dim(h, kh, sh, ph);
    let wo = out_dim(wd, kw, sw, pw);
    for_each_chunk_mut(dw, cin_g * kh * kw, |oc, dw_block| {
        let group = oc / cout_g;
        for ic_l in 0..cin_g {
            let ic = group * cin_g + ic_l;
            for khi in 0..kh {
                let (oh_lo, oh_hi) = tap_range(h, ho, sh, ph, khi);
                for kwi in 0..kw {
                    let (ow_lo, ow_hi) = tap_range(wd, wo, sw, pw, kwi);
                    let mut acc = T::zero();
                    for b in 0..batch {
                        let g_plane =
                            &g_out[(b * cout + oc) * ho * wo..(b * cout + oc + 1) * ho * wo];
                        let x_plane = &x[(b * cin + ic) * h * wd..(b * cin + ic + 1) * h * wd];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * sh + khi - ph;
                            let g_row = &g_plane[oh * wo..(oh + 1) * wo];
                            let x_row = &x_plane[ih * wd..(ih + 1) * wd];
                            if sw == 1 {
                                let x_off = ow_lo + kwi - pw;
                                for (&gv, &xv) in g_row[ow_lo..ow_hi]
                                    .iter()
                                    .zip(x_row[x_off..x_off + (ow_hi - ow_lo)].iter())
                                {
                                    acc += gv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    acc += g_row[ow] * x_row[ow * sw + kwi - pw];
                                }
                            }
                        }
                    }
                    dw_block[(ic_l * kh + khi) * kw + kwi] = acc;
                }
            }
        }
    });
}

pub fn conv2d_bwd_bias<T: Scalar>(g_out: &[T], batch: usize, cout: usize, plane: usize, db: &mut [T]) {
    for_each_chunk_mut(db, 1, |oc, db_slot| {
        let mut acc = T::zero();
        for b in 0..batch {
            let g_plane = &g_out[(b * cout + oc) * plane..(b * cout + oc + 1) * plane];
            for &g in g_plane {
                acc += g;
            }
        }
        db_slot[0] = acc;
    });
}

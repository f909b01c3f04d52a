//! Direct 3D convolution over [B, C, L, H, W] volumes, stride and zero
//! padding per axis, no channel groups. Same parallel split and per-cell
//! accumulation order conventions as the 2D kernel.

use super::conv2d::{out_dim, tap_range};
use crate::parallel::for_each_chunk_mut;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

pub fn conv3d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    xs: (usize, usize, usize, usize, usize),
    ks: (usize, usize, usize, usize),
    spec: Conv3dSpec,
    out: &mut [T],
) {
    let (batch, cin, l, h, wd) = xs;
    let (cout, kl, kh, kw) = ks;
    let (sl, sh, sw) = spec.stride;
    let (pl, ph, pw) = spec.padding;
    let lo = out_dim(l, kl, sl, pl);
    let ho = out_dim(h, kh, sh, ph);
    let wo = out_dim(wd, kw, sw, pw);
    let _ = batch;
    for_each_chunk_mut(out, lo * ho * wo, |vol, out_vol| {
        let b = vol / cout;
        let oc = vol % cout;
        let init = bias.map_or(T::zero(), |bv| bv[oc]);
        for v in out_vol.iter_mut() {
            *v = init;
        }
        for ic in 0..cin {
            let x_vol = &x[(b * cin + ic) * l * h * wd..(b * cin + ic + 1) * l * h * wd];
            for kli in 0..kl {
                let (ol_lo, ol_hi) = tap_range(l, lo, sl, pl, kli);
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = tap_range(h, ho, sh, ph, khi);
                    for kwi in 0..kw {
                        let wv = w[(((oc * cin + ic) * kl + kli) * kh + khi) * kw + kwi];
                        let (ow_lo, ow_hi) = tap_range(wd, wo, sw, pw, kwi);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for ol in ol_lo..ol_hi {
                            let il = ol * sl + kli - pl;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * sh + khi - ph;
                                let x_row = &x_vol[(il * h + ih) * wd..(il * h + ih + 1) * wd];
                                let out_row =
                                    &mut out_vol[(ol * ho + oh) * wo..(ol * ho + oh + 1) * wo];
                                if sw == 1 {
                                    let x_off = ow_lo + kwi - pw;
                                    let src = &x_row[x_off..x_off + (ow_hi - ow_lo)];
                                    for (o, &xv) in
                                        out_row[ow_lo..ow_hi].iter_mut().zip(src.iter())
                                    {
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
            }
        }
    });
}

pub fn conv3d_bwd_input<T: Scalar>(
    g_out: &[T],
    w: &[T],
    xs: (usize, usize, usize, usize, usize),
    ks: (usize, usize, usize, usize),
    spec: Conv3dSpec,
    dx: &mut [T],
) {
    let (batch, cin, l, h, wd) = xs;
    let (cout, kl, kh, kw) = ks;
    let (sl, sh, sw) = spec.stride;
    let (pl, ph, pw) = spec.padding;
    let lo = out_dim(l, kl, sl, pl);
    let ho = out_dim(h, kh, sh, ph);
    let wo = out_dim(wd, kw, sw, pw);
    let _ = batch;
    for_each_chunk_mut(dx, l * h * wd, |vol, dx_vol| {
        let b = vol / cin;
        let ic = vol % cin;
        for v in dx_vol.iter_mut() {
            *v = T::zero();
        }
        for oc in 0..cout {
            let g_vol = &g_out[(b * cout + oc) * lo * ho * wo..(b * cout + oc + 1) * lo * ho * wo];
            for kli in 0..kl {
                let (ol_lo, ol_hi) = tap_range(l, lo, sl, pl, kli);
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = tap_range(h, ho, sh, ph, khi);
                    for kwi in 0..kw {
                        let wv = w[(((oc * cin + ic) * kl + kli) * kh + khi) * kw + kwi];
                        let (ow_lo, ow_hi) = tap_range(wd, wo, sw, pw, kwi);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for ol in ol_lo..ol_hi {
                            let il = ol * sl + kli - pl;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * sh + khi - ph;
                                let g_row =
                                    &g_vol[(ol * ho + oh) * wo..(ol * ho + oh + 1) * wo];
                                let dx_row =
                                    &mut dx_vol[(il * h + ih) * wd..(il * h + ih + 1) * wd];
                                if sw == 1 {
                                    let x_off = ow_lo + kwi - pw;
                                    let dst = &mut dx_row[x_off..x_off + (ow_hi - ow_lo)];
                                    for (d, &gv) in
                                        dst.iter_mut().zip(g_row[ow_lo..ow_hi].iter())
                                    {
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
            }
        }
    });
}

pub fn conv3d_bwd_weight<T: Scalar>(
    g_out: &[T],
    x: &[T],
    xs: (usize, usize, usize, usize, usize),
    ks: (usize, usize, usize, usize),
    spec: Conv3dSpec,
    dw: &mut [T],
) {
    let (batch, cin, l, h, wd) = xs;
    let (cout, kl, kh, kw) = ks;
    let (sl, sh, sw) = spec.stride;
    let (pl, ph, pw) = spec.padding;
    let lo = out_dim(l, kl, sl, pl);
    let ho = out_dim(h, kh, sh, ph);
    let wo = out_dim(wd, kw, sw, pw);
    for_each_chunk_mut(dw, cin * kl * kh * kw, |oc, dw_block| {
        for ic in 0..cin {
            for kli in 0..kl {
                let (ol_lo, ol_hi) = tap_range(l, lo, sl, pl, kli);
                for khi in 0..kh {
                    let (oh_lo, oh_hi) = tap_range(h, ho, sh, ph, khi);
                    for kwi in 0..kw {
                        let (ow_lo, ow_hi) = tap_range(wd, wo, sw, pw, kwi);
                        let mut acc = T::zero();
                        for b in 0..batch {
                            let g_vol = &g_out[(b * cout + oc) * lo * ho * wo
                                ..(b * cout + oc + 1) * lo * ho * wo];
                            let x_vol = &x
                                [(b * cin + ic) * l * h * wd..(b * cin + ic + 1) * l * h * wd];
                            for ol in ol_lo..ol_hi {
                                let il = ol * sl + kli - pl;
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * sh + khi - ph;
                                    let g_row =
                                        &g_vol[(ol * ho + oh) * wo..(ol * ho + oh + 1) * wo];
                                    let x_row =
                                        &x_vol[(il * h + ih) * wd..(il * h + ih + 1) * wd];
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
                        }
                        dw_block[((ic * kl + kli) * kh + khi) * kw + kwi] = acc;
                    }
                }
            }
        }
    });
}

//! Nearest-neighbor upsampling, 2D [B, C, H, W] and spatial-only 3D
//! [B, C, L, H, W] (the L axis is left untouched).

use crate::parallel::for_each_chunk_mut;
use crate::scalar::Scalar;

pub fn upsample2d_fwd<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize, out: &mut [T]) {
    debug_assert_eq!(out.len(), planes * h * f * w * f);
    for_each_chunk_mut(out, h * f * w * f, |p, out_plane| {
        let x_plane = &x[p * h * w..(p + 1) * h * w];
        for oh in 0..h * f {
            let x_row = &x_plane[(oh / f) * w..(oh / f + 1) * w];
            let out_row = &mut out_plane[oh * w * f..(oh + 1) * w * f];
            for (ow, o) in out_row.iter_mut().enumerate() {
                *o = x_row[ow / f];
            }
        }
    });
}

pub fn upsample2d_bwd<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, f: usize, dx: &mut [T]) {
    debug_assert_eq!(dx.len(), planes * h * w);
    for_each_chunk_mut(dx, h * w, |p, dx_plane| {
        let g_plane = &g[p * h * f * w * f..(p + 1) * h * f * w * f];
        for v in dx_plane.iter_mut() {
            *v = T::zero();
        }
        for oh in 0..h * f {
            let g_row = &g_plane[oh * w * f..(oh + 1) * w * f];
            let dx_row = &mut dx_plane[(oh / f) * w..(oh / f + 1) * w];
            for (ow, &gv) in g_row.iter().enumerate() {
                dx_row[ow / f] += gv;
            }
        }
    });
}

pub fn upsample3d_fwd<T: Scalar>(
    x: &[T],
    vols: usize,
    l: usize,
    h: usize,
    w: usize,
    f: usize,
    out: &mut [T],
) {
    upsample2d_fwd(x, vols * l, h, w, f, out);
}

pub fn upsample3d_bwd<T: Scalar>(
    g: &[T],
    vols: usize,
    l: usize,
    h: usize,
    w: usize,
    f: usize,
    dx: &mut [T],
) {
    upsample2d_bwd(g, vols * l, h, w, f, dx);
}

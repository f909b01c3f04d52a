//! Volumetric denoiser backbone for the motion stream.
//!
//! Mirror of the content backbone with 3x3x3 convolutions over
//! `[B, C, L, H, W]` and two differences: no spatial self-attention (the
//! exchange with the content stream plays that role) and every parameter
//! trains. Downsampling touches only the spatial axes, so the clip length
//! survives to the bottleneck, where stacked temporal kernels cover all
//! frames. The head conv starts at zero: the untrained stream predicts
//! zero noise instead of spraying random structure into sampling.

use crate::attention::{linear_bias, mha};
use crate::config::Config;
use crate::error::{config_err, Result};
use crate::params::{he_init, Fwd, ParamStore};
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Scalar};
use rand_chacha::ChaCha8Rng;

fn insert_conv3<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
) {
    store.insert(
        format!("{name}.w"),
        he_init(rng, &[out_c, in_c, 3, 3, 3], in_c * 27),
        true,
    );
    store.insert(format!("{name}.b"), Array::zeros(&[out_c]), true);
}

fn insert_gn<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) {
    store.insert(format!("{name}.g"), Array::from_fn(&[c], |_| T::one()), true);
    store.insert(format!("{name}.b"), Array::zeros(&[c]), true);
}

fn insert_block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    blk: &str,
    in_c: usize,
    out_c: usize,
    temb_hidden: usize,
    text_dim: usize,
) {
    insert_gn(store, &format!("{blk}.gn1"), in_c);
    insert_conv3(store, rng, &format!("{blk}.c1"), out_c, in_c);
    store.insert(
        format!("{blk}.t.w"),
        he_init(rng, &[temb_hidden, out_c], temb_hidden),
        true,
    );
    store.insert(format!("{blk}.t.b"), Array::zeros(&[out_c]), true);
    insert_gn(store, &format!("{blk}.gn2"), out_c);
    insert_conv3(store, rng, &format!("{blk}.c2"), out_c, out_c);
    if in_c != out_c {
        store.insert(
            format!("{blk}.skip.w"),
            he_init(rng, &[out_c, in_c, 1, 1, 1], in_c),
            true,
        );
        store.insert(format!("{blk}.skip.b"), Array::zeros(&[out_c]), true);
    }
    insert_gn(store, &format!("{blk}.tgn"), out_c);
    store.insert(
        format!("{blk}.text.q.w"),
        he_init(rng, &[out_c, out_c], out_c),
        true,
    );
    for p in ["k", "v"] {
        store.insert(
            format!("{blk}.text.{p}.w"),
            he_init(rng, &[text_dim, out_c], text_dim),
            true,
        );
    }
    store.insert(
        format!("{blk}.text.o.w"),
        he_init(rng, &[out_c, out_c], out_c),
        true,
    );
}

/// Registers the motion backbone under `prefix`; call order defines RNG
/// consumption, as with the content net.
pub fn init_motion_net_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &Config,
) {
    let c = cfg.model_channels();
    let (m1, m2) = (cfg.motion_width, cfg.motion_width * 2);
    let (th, td) = (cfg.temb_hidden, cfg.text_dim);

    insert_conv3(store, rng, &format!("{prefix}.stem"), m1, c);
    store.insert(
        format!("{prefix}.temb.l1.w"),
        he_init(rng, &[cfg.temb_dim, th], cfg.temb_dim),
        true,
    );
    store.insert(format!("{prefix}.temb.l1.b"), Array::zeros(&[th]), true);
    store.insert(format!("{prefix}.temb.l2.w"), he_init(rng, &[th, th], th), true);
    store.insert(format!("{prefix}.temb.l2.b"), Array::zeros(&[th]), true);

    insert_block(store, rng, &format!("{prefix}.d1"), m1, m1, th, td);
    insert_conv3(store, rng, &format!("{prefix}.down"), m2, m1);
    insert_block(store, rng, &format!("{prefix}.d2"), m2, m2, th, td);
    insert_block(store, rng, &format!("{prefix}.mid"), m2, m2, th, td);
    insert_block(store, rng, &format!("{prefix}.u2"), 2 * m2, m2, th, td);
    insert_conv3(store, rng, &format!("{prefix}.up"), m1, m2);
    insert_block(store, rng, &format!("{prefix}.u1"), 2 * m1, m1, th, td);

    insert_gn(store, &format!("{prefix}.hgn"), m1);
    store.insert(format!("{prefix}.head.w"), Array::zeros(&[c, m1, 3, 3, 3]), true);
    store.insert(format!("{prefix}.head.b"), Array::zeros(&[c]), true);
}

fn conv3<T: Scalar>(
    fwd: &Fwd<T>,
    name: &str,
    x: &Tensor<T>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Result<Tensor<T>> {
    Ok(x.conv3d(
        &fwd.p(&format!("{name}.w"))?,
        Some(&fwd.p(&format!("{name}.b"))?),
        stride,
        pad,
    )?)
}

/// Residual 3D conv pair with time-conditioned channel bias.
pub fn res_block3d<T: Scalar>(
    fwd: &Fwd<T>,
    blk: &str,
    x: &Tensor<T>,
    temb_h: &Tensor<T>,
    gn_groups: usize,
) -> Result<Tensor<T>> {
    let h = x
        .group_norm(
            &fwd.p(&format!("{blk}.gn1.g"))?,
            &fwd.p(&format!("{blk}.gn1.b"))?,
            gn_groups,
            1e-5,
        )?
        .silu();
    let h = conv3(fwd, &format!("{blk}.c1"), &h, (1, 1, 1), (1, 1, 1))?;
    let out_c = h.shape()[1];
    let bias = linear_bias(fwd, &format!("{blk}.t"), temb_h)?
        .reshape(&[temb_h.shape()[0], out_c, 1, 1, 1])?;
    let h = h.add(&bias)?;
    let h = h
        .group_norm(
            &fwd.p(&format!("{blk}.gn2.g"))?,
            &fwd.p(&format!("{blk}.gn2.b"))?,
            gn_groups,
            1e-5,
        )?
        .silu();
    let h = conv3(fwd, &format!("{blk}.c2"), &h, (1, 1, 1), (1, 1, 1))?;
    let skip = if fwd.has(&format!("{blk}.skip.w")) {
        x.conv3d(
            &fwd.p(&format!("{blk}.skip.w"))?,
            Some(&fwd.p(&format!("{blk}.skip.b"))?),
            (1, 1, 1),
            (0, 0, 0),
        )?
    } else {
        x.clone()
    };
    Ok(h.add(&skip)?)
}

/// Residual cross-attention from every (frame, position) token onto the
/// prompt. `text` is `[B, S, D]`; queries cover all L*H*W positions.
pub fn text_attn3d<T: Scalar>(
    fwd: &Fwd<T>,
    blk: &str,
    x: &Tensor<T>,
    text: &Tensor<T>,
    mask: &Array<T>,
    heads: usize,
    gn_groups: usize,
) -> Result<Tensor<T>> {
    let [b, c, l, h, w] = x.shape()[..] else {
        return config_err(format!("need [B,C,L,H,W], got {:?}", x.shape()));
    };
    let normed = x.group_norm(
        &fwd.p(&format!("{blk}.tgn.g"))?,
        &fwd.p(&format!("{blk}.tgn.b"))?,
        gn_groups,
        1e-5,
    )?;
    let tokens = normed
        .permute(&[0, 2, 3, 4, 1])?
        .reshape(&[b, l * h * w, c])?;
    let attended = mha(fwd, &format!("{blk}.text"), &tokens, text, heads, 0.0, Some(mask))?;
    let back = attended
        .reshape(&[b, l, h, w, c])?
        .permute(&[0, 4, 1, 2, 3])?;
    Ok(x.add(&back)?)
}

/// One full motion block: residual convs then text attention.
#[allow(clippy::too_many_arguments)]
pub fn motion_block<T: Scalar>(
    fwd: &Fwd<T>,
    blk: &str,
    x: &Tensor<T>,
    temb_h: &Tensor<T>,
    text: &Tensor<T>,
    mask: &Array<T>,
    heads: usize,
    gn_groups: usize,
) -> Result<Tensor<T>> {
    let h = res_block3d(fwd, blk, x, temb_h, gn_groups)?;
    text_attn3d(fwd, blk, &h, text, mask, heads, gn_groups)
}

pub fn motion_stem<T: Scalar>(fwd: &Fwd<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    conv3(fwd, &format!("{prefix}.stem"), x, (1, 1, 1), (1, 1, 1))
}

/// Spatial-only downsampling; the frame axis is untouched.
pub fn motion_down<T: Scalar>(fwd: &Fwd<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    conv3(fwd, &format!("{prefix}.down"), x, (1, 2, 2), (1, 1, 1))
}

pub fn motion_up<T: Scalar>(fwd: &Fwd<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let up = x.upsample_nearest3d_spatial(2)?;
    conv3(fwd, &format!("{prefix}.up"), &up, (1, 1, 1), (1, 1, 1))
}

pub fn motion_head<T: Scalar>(
    fwd: &Fwd<T>,
    prefix: &str,
    x: &Tensor<T>,
    gn_groups: usize,
) -> Result<Tensor<T>> {
    let h = x
        .group_norm(
            &fwd.p(&format!("{prefix}.hgn.g"))?,
            &fwd.p(&format!("{prefix}.hgn.b"))?,
            gn_groups,
            1e-5,
        )?
        .silu();
    conv3(fwd, &format!("{prefix}.head"), &h, (1, 1, 1), (1, 1, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::time_embedding;
    use crate::text::{pad_mask, PAD};
    use crate::unet2d::temb_mlp;
    use dsdn_core::Graph;
    use rand::SeedableRng;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.latent_channels = 2;
        cfg.latent_size = 4;
        cfg.canvas = 16;
        cfg.motion_width = 6;
        cfg.heads = 2;
        cfg.gn_groups = 2;
        cfg.temb_dim = 8;
        cfg.temb_hidden = 10;
        cfg.text_dim = 6;
        cfg
    }

    #[test]
    fn everything_is_trainable() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_motion_net_params(&mut store, &mut rng, "mot", &cfg);
        assert_eq!(store.trainable_names().len(), store.len());
    }

    #[test]
    fn stage_shapes_line_up() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_motion_net_params(&mut store, &mut rng, "mot", &cfg);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let x = g.constant(&Array::<f32>::randn(&mut rng, &[1, 2, 3, 8, 8]));
        let temb = g.constant(&time_embedding::<f32>(&[7], cfg.temb_dim).unwrap());
        let th = temb_mlp(&fwd, "mot", &temb).unwrap();
        let text = g.constant(&Array::<f32>::randn(&mut rng, &[1, 3, 6]));
        let mask = pad_mask::<f32>(&[vec![2, 3, PAD]]).unwrap();

        let h = motion_stem(&fwd, "mot", &x).unwrap();
        assert_eq!(h.shape(), &[1, 6, 3, 8, 8]);
        let h = motion_block(&fwd, "mot.d1", &h, &th, &text, &mask, 2, 2).unwrap();
        assert_eq!(h.shape(), &[1, 6, 3, 8, 8]);
        let d = motion_down(&fwd, "mot", &h).unwrap();
        assert_eq!(d.shape(), &[1, 12, 3, 4, 4]);
        let u = motion_up(&fwd, "mot", &d).unwrap();
        assert_eq!(u.shape(), &[1, 6, 3, 8, 8]);
        let out = motion_head(&fwd, "mot", &u, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 3, 8, 8]);
        // Zero head: the untrained stream predicts exactly zero.
        for &v in out.value().data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn frames_mix_through_temporal_kernels() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_motion_net_params(&mut store, &mut rng, "mot", &cfg);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let temb = g.constant(&time_embedding::<f32>(&[5], cfg.temb_dim).unwrap());
        let th = temb_mlp(&fwd, "mot", &temb).unwrap();

        let base = Array::<f32>::randn(&mut rng, &[1, 6, 4, 4, 4]);
        let mut bumped = base.clone();
        // Perturb frame 0 only: [B, C, L, H, W] layout, frame stride 16.
        for c in 0..6 {
            for i in 0..16 {
                bumped.data_mut()[c * 4 * 16 + i] += 0.3;
            }
        }
        // Two stacked residual blocks (two 3-wide temporal kernels each)
        // reach at least two frames from the perturbation.
        let pass = |arr: &Array<f32>| {
            let h = res_block3d(&fwd, "mot.d1", &g.constant(arr), &th, 2).unwrap();
            res_block3d(&fwd, "mot.d1", &h, &th, 2).unwrap().value()
        };
        let a = pass(&base);
        let b = pass(&bumped);
        let frame = 2;
        let mut moved = false;
        for c in 0..6 {
            for i in 0..16 {
                let idx = c * 4 * 16 + frame * 16 + i;
                if (a.data()[idx] - b.data()[idx]).abs() > 1e-7 {
                    moved = true;
                }
            }
        }
        assert!(moved, "temporal kernels failed to propagate");
    }
}

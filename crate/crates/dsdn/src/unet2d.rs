//! Frame-wise denoiser backbone for the content stream.
//!
//! Two resolution levels around a bottleneck, every block being residual
//! conv -> self-attention -> text cross-attention. The whole base is
//! frozen at init; the only trainable pieces registered here are the
//! low-rank adapters riding on the attention projections. Exchange with
//! the motion stream happens BETWEEN these blocks and is owned by the
//! model assembly, not this file.
//!
//! All ops take `[N, C, H, W]` with N = batch x frames; frames never mix
//! here.

use crate::attention::mha;
use crate::config::Config;
use crate::error::Result;
use crate::interact::{spatial_tokens, tokens_spatial};
use crate::params::{he_init, scaled_randn, Fwd, ParamStore};
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Scalar};
use rand_chacha::ChaCha8Rng;

fn insert_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    trainable: bool,
) {
    store.insert(
        format!("{name}.w"),
        he_init(rng, &[out_c, in_c, k, k], in_c * k * k),
        trainable,
    );
    store.insert(format!("{name}.b"), Array::zeros(&[out_c]), trainable);
}

fn insert_gn<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, trainable: bool) {
    store.insert(format!("{name}.g"), Array::from_fn(&[c], |_| T::one()), trainable);
    store.insert(format!("{name}.b"), Array::zeros(&[c]), trainable);
}

fn insert_proj<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
    trainable_base: bool,
) {
    store.insert(format!("{name}.w"), he_init(rng, &[d_in, d_out], d_in), trainable_base);
    if rank > 0 {
        store.insert(
            format!("{name}.a"),
            scaled_randn(rng, &[d_in, rank], 0.02),
            true,
        );
        store.insert(format!("{name}.b"), Array::zeros(&[d_out, rank]), true);
    }
}

fn insert_block<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    blk: &str,
    in_c: usize,
    out_c: usize,
    temb_hidden: usize,
    text_dim: usize,
    rank: usize,
) {
    insert_gn(store, &format!("{blk}.gn1"), in_c, false);
    insert_conv(store, rng, &format!("{blk}.c1"), out_c, in_c, 3, false);
    store.insert(
        format!("{blk}.t.w"),
        he_init(rng, &[temb_hidden, out_c], temb_hidden),
        false,
    );
    store.insert(format!("{blk}.t.b"), Array::zeros(&[out_c]), false);
    insert_gn(store, &format!("{blk}.gn2"), out_c, false);
    insert_conv(store, rng, &format!("{blk}.c2"), out_c, out_c, 3, false);
    if in_c != out_c {
        insert_conv(store, rng, &format!("{blk}.skip"), out_c, in_c, 1, false);
    }
    insert_gn(store, &format!("{blk}.agn"), out_c, false);
    for p in ["q", "k", "v", "o"] {
        insert_proj(store, rng, &format!("{blk}.self.{p}"), out_c, out_c, rank, false);
    }
    insert_gn(store, &format!("{blk}.tgn"), out_c, false);
    insert_proj(store, rng, &format!("{blk}.text.q"), out_c, out_c, rank, false);
    insert_proj(store, rng, &format!("{blk}.text.k"), text_dim, out_c, rank, false);
    insert_proj(store, rng, &format!("{blk}.text.v"), text_dim, out_c, rank, false);
    insert_proj(store, rng, &format!("{blk}.text.o"), out_c, out_c, rank, false);
}

/// Registers the full frozen backbone plus its trainable adapters under
/// `prefix`. Keep the call order stable: it defines how the init RNG
/// stream is consumed.
pub fn init_content_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &Config,
) {
    let c = cfg.model_channels();
    let (w1, w2) = (cfg.content_width, cfg.content_width * 2);
    let (th, td, r) = (cfg.temb_hidden, cfg.text_dim, cfg.rank);

    insert_conv(store, rng, &format!("{prefix}.stem"), w1, c, 3, false);
    store.insert(
        format!("{prefix}.temb.l1.w"),
        he_init(rng, &[cfg.temb_dim, th], cfg.temb_dim),
        false,
    );
    store.insert(format!("{prefix}.temb.l1.b"), Array::zeros(&[th]), false);
    store.insert(format!("{prefix}.temb.l2.w"), he_init(rng, &[th, th], th), false);
    store.insert(format!("{prefix}.temb.l2.b"), Array::zeros(&[th]), false);

    insert_block(store, rng, &format!("{prefix}.d1"), w1, w1, th, td, r);
    insert_conv(store, rng, &format!("{prefix}.down"), w2, w1, 3, false);
    insert_block(store, rng, &format!("{prefix}.d2"), w2, w2, th, td, r);
    insert_block(store, rng, &format!("{prefix}.mid"), w2, w2, th, td, r);
    insert_block(store, rng, &format!("{prefix}.u2"), 2 * w2, w2, th, td, r);
    insert_conv(store, rng, &format!("{prefix}.up"), w1, w2, 3, false);
    insert_block(store, rng, &format!("{prefix}.u1"), 2 * w1, w1, th, td, r);

    insert_gn(store, &format!("{prefix}.hgn"), w1, false);
    // The head must not start at zero: the backbone never trains, so a
    // zero head would pin this stream's prediction to zero forever. A
    // small random head leaves room for the adapters to steer it.
    store.insert(
        format!("{prefix}.head.w"),
        scaled_randn(rng, &[c, w1, 3, 3], 0.1 * (2.0 / (w1 * 9) as f64).sqrt()),
        false,
    );
    store.insert(format!("{prefix}.head.b"), Array::zeros(&[c]), false);
}

/// Shared time MLP: sinusoidal features in, per-step hidden vector out.
pub fn temb_mlp<T: Scalar>(fwd: &Fwd<T>, prefix: &str, temb: &Tensor<T>) -> Result<Tensor<T>> {
    let h = crate::attention::linear_bias(fwd, &format!("{prefix}.temb.l1"), temb)?.silu();
    crate::attention::linear_bias(fwd, &format!("{prefix}.temb.l2"), &h)
}

/// Residual conv pair with a time-conditioned channel bias.
pub fn res_block2d<T: Scalar>(
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
        .silu()
        .conv2d(
            &fwd.p(&format!("{blk}.c1.w"))?,
            Some(&fwd.p(&format!("{blk}.c1.b"))?),
            (1, 1),
            (1, 1),
            1,
        )?;
    let out_c = h.shape()[1];
    let bias = crate::attention::linear_bias(fwd, &format!("{blk}.t"), temb_h)?
        .reshape(&[temb_h.shape()[0], out_c, 1, 1])?;
    let h = h.add(&bias)?;
    let h = h
        .group_norm(
            &fwd.p(&format!("{blk}.gn2.g"))?,
            &fwd.p(&format!("{blk}.gn2.b"))?,
            gn_groups,
            1e-5,
        )?
        .silu()
        .conv2d(
            &fwd.p(&format!("{blk}.c2.w"))?,
            Some(&fwd.p(&format!("{blk}.c2.b"))?),
            (1, 1),
            (1, 1),
            1,
        )?;
    let skip = if fwd.has(&format!("{blk}.skip.w")) {
        x.conv2d(
            &fwd.p(&format!("{blk}.skip.w"))?,
            Some(&fwd.p(&format!("{blk}.skip.b"))?),
            (1, 1),
            (0, 0),
            1,
        )?
    } else {
        x.clone()
    };
    Ok(h.add(&skip)?)
}

/// Residual self-attention over this frame's spatial positions.
pub fn self_attn2d<T: Scalar>(
    fwd: &Fwd<T>,
    blk: &str,
    x: &Tensor<T>,
    heads: usize,
    gn_groups: usize,
    lambda: f64,
) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.shape()[..] else {
        return crate::error::config_err(format!("need [N,C,H,W], got {:?}", x.shape()));
    };
    let normed = x.group_norm(
        &fwd.p(&format!("{blk}.agn.g"))?,
        &fwd.p(&format!("{blk}.agn.b"))?,
        gn_groups,
        1e-5,
    )?;
    let tokens = spatial_tokens(&normed)?;
    let attended = mha(fwd, &format!("{blk}.self"), &tokens, &tokens, heads, lambda, None)?;
    Ok(x.add(&tokens_spatial(&attended, h, w)?)?)
}

/// Residual cross-attention from spatial positions onto prompt tokens.
/// `text` is `[N, S, D]` (already aligned with the frame batch) and
/// `mask` its padding mask.
pub fn text_attn2d<T: Scalar>(
    fwd: &Fwd<T>,
    blk: &str,
    x: &Tensor<T>,
    text: &Tensor<T>,
    mask: &Array<T>,
    heads: usize,
    gn_groups: usize,
    lambda: f64,
) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.shape()[..] else {
        return crate::error::config_err(format!("need [N,C,H,W], got {:?}", x.shape()));
    };
    let normed = x.group_norm(
        &fwd.p(&format!("{blk}.tgn.g"))?,
        &fwd.p(&format!("{blk}.tgn.b"))?,
        gn_groups,
        1e-5,
    )?;
    let tokens = spatial_tokens(&normed)?;
    let attended = mha(
        fwd,
        &format!("{blk}.text"),
        &tokens,
        text,
        heads,
        lambda,
        Some(mask),
    )?;
    Ok(x.add(&tokens_spatial(&attended, h, w)?)?)
}

/// One full content block: residual convs, then both attentions.
#[allow(clippy::too_many_arguments)]
pub fn content_block<T: Scalar>(
    fwd: &Fwd<T>,
    blk: &str,
    x: &Tensor<T>,
    temb_h: &Tensor<T>,
    text: &Tensor<T>,
    mask: &Array<T>,
    heads: usize,
    gn_groups: usize,
    lambda: f64,
) -> Result<Tensor<T>> {
    let h = res_block2d(fwd, blk, x, temb_h, gn_groups)?;
    let h = self_attn2d(fwd, blk, &h, heads, gn_groups, lambda)?;
    text_attn2d(fwd, blk, &h, text, mask, heads, gn_groups, lambda)
}

pub fn content_stem<T: Scalar>(fwd: &Fwd<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.conv2d(
        &fwd.p(&format!("{prefix}.stem.w"))?,
        Some(&fwd.p(&format!("{prefix}.stem.b"))?),
        (1, 1),
        (1, 1),
        1,
    )?)
}

pub fn content_down<T: Scalar>(fwd: &Fwd<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.conv2d(
        &fwd.p(&format!("{prefix}.down.w"))?,
        Some(&fwd.p(&format!("{prefix}.down.b"))?),
        (2, 2),
        (1, 1),
        1,
    )?)
}

pub fn content_up<T: Scalar>(fwd: &Fwd<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.upsample_nearest2d(2)?.conv2d(
        &fwd.p(&format!("{prefix}.up.w"))?,
        Some(&fwd.p(&format!("{prefix}.up.b"))?),
        (1, 1),
        (1, 1),
        1,
    )?)
}

pub fn content_head<T: Scalar>(
    fwd: &Fwd<T>,
    prefix: &str,
    x: &Tensor<T>,
    gn_groups: usize,
) -> Result<Tensor<T>> {
    Ok(x.group_norm(
        &fwd.p(&format!("{prefix}.hgn.g"))?,
        &fwd.p(&format!("{prefix}.hgn.b"))?,
        gn_groups,
        1e-5,
    )?
    .silu()
    .conv2d(
        &fwd.p(&format!("{prefix}.head.w"))?,
        Some(&fwd.p(&format!("{prefix}.head.b"))?),
        (1, 1),
        (1, 1),
        1,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::PAD;
    use dsdn_core::Graph;
    use rand::SeedableRng;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.latent_channels = 2;
        cfg.latent_size = 4;
        cfg.canvas = 16;
        cfg.content_width = 8;
        cfg.heads = 2;
        cfg.gn_groups = 2;
        cfg.temb_dim = 8;
        cfg.temb_hidden = 10;
        cfg.text_dim = 6;
        cfg.rank = 2;
        cfg
    }

    #[test]
    fn only_adapters_are_trainable() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_content_params(&mut store, &mut rng, "con", &cfg);
        let trainables = store.trainable_names();
        assert!(!trainables.is_empty());
        for name in &trainables {
            assert!(
                name.ends_with(".a") || name.ends_with(".b"),
                "{name} should be frozen"
            );
        }
        // 5 blocks x 2 attentions x 4 projections x 2 factors.
        assert_eq!(trainables.len(), 5 * 2 * 4 * 2);
    }

    #[test]
    fn block_pipeline_preserves_spatial_shape() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_content_params(&mut store, &mut rng, "con", &cfg);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let n = 2;
        let x = g.constant(&Array::<f32>::randn(&mut rng, &[n, 2, 8, 8]));
        let temb = g.constant(
            &crate::schedule::time_embedding::<f32>(&[3, 40], cfg.temb_dim).unwrap(),
        );
        let temb_h = temb_mlp(&fwd, "con", &temb).unwrap();
        let text = g.constant(&Array::<f32>::randn(&mut rng, &[n, 3, 6]));
        let mask = crate::text::pad_mask::<f32>(&[vec![2, 3, PAD], vec![4, PAD, PAD]]).unwrap();

        let h = content_stem(&fwd, "con", &x).unwrap();
        assert_eq!(h.shape(), &[n, 8, 8, 8]);
        let h = content_block(&fwd, "con.d1", &h, &temb_h, &text, &mask, 2, 2, 1.0).unwrap();
        assert_eq!(h.shape(), &[n, 8, 8, 8]);
        let d = content_down(&fwd, "con", &h).unwrap();
        assert_eq!(d.shape(), &[n, 16, 4, 4]);
        let u = content_up(&fwd, "con", &d).unwrap();
        assert_eq!(u.shape(), &[n, 8, 8, 8]);
        let out = content_head(&fwd, "con", &u, 2).unwrap();
        assert_eq!(out.shape(), &[n, 2, 8, 8]);
        for &v in out.value().data() {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn lambda_zero_matches_base_bitwise() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_content_params(&mut store, &mut rng, "con", &cfg);
        // Give the adapters nonzero B so a live adapter would actually
        // change the output.
        for name in store.trainable_names() {
            if name.ends_with(".b") {
                let shape = store.get(&name).unwrap().value.shape().to_vec();
                store.get_mut(&name).unwrap().value = Array::randn(&mut rng, &shape);
            }
        }
        let x_arr = Array::<f32>::randn(&mut rng, &[1, 8, 6, 6]);
        let run = |lambda: f64, with_adapters: bool| {
            let pruned = if with_adapters {
                store.clone()
            } else {
                // Adapters are exactly the trainable entries here.
                let mut s = ParamStore::new();
                for (name, p) in store.iter() {
                    if !p.trainable {
                        s.insert(name.clone(), p.value.clone(), false);
                    }
                }
                s
            };
            let g = Graph::new();
            let fwd = Fwd::new(&g, &pruned, false);
            self_attn2d(&fwd, "con.d1", &g.constant(&x_arr), 2, 2, lambda)
                .unwrap()
                .value()
        };
        let with_zero = run(0.0, true);
        let live = run(1.0, true);
        let base = run(0.0, false);
        assert!(with_zero.max_abs_diff(&live) > 0.0, "adapters are inert");
        for (a, b) in with_zero.data().iter().zip(base.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn time_conditioning_changes_output() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_content_params(&mut store, &mut rng, "con", &cfg);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let x = g.constant(&Array::<f32>::randn(&mut rng, &[1, 8, 6, 6]));
        let run = |t: usize| {
            let temb = g.constant(
                &crate::schedule::time_embedding::<f32>(&[t], cfg.temb_dim).unwrap(),
            );
            let th = temb_mlp(&fwd, "con", &temb).unwrap();
            res_block2d(&fwd, "con.d1", &x, &th, 2).unwrap().value()
        };
        assert!(run(1).max_abs_diff(&run(47)) > 1e-6);
    }
}

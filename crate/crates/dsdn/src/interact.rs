//! Bidirectional coupling between the content and motion streams.
//!
//! At matching resolutions the two networks trade information through
//! cross-attention with the query taken from the OPPOSITE stream: the
//! content update attends over content tokens with motion queries, and
//! vice versa. Both updates are computed from the pre-exchange features
//! and added residually, so evaluation order cannot matter. Output
//! projections start at zero, making a fresh exchange a no-op.
//!
//! Tokens are per-frame spatial positions: frame k of one stream only
//! ever talks to frame k of the other.

use crate::attention::mha;
use crate::error::{config_err, Result};
use crate::params::{he_init, Fwd, ParamStore};
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Scalar};
use rand_chacha::ChaCha8Rng;

/// Registers one exchange site under `prefix`: block `con` updates the
/// content stream (motion queries), block `mot` updates the motion stream
/// (content queries). Output projections are zero so the site starts
/// inert.
pub fn init_exchange_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    content_width: usize,
    motion_width: usize,
    trainable: bool,
) {
    let mut block = |name: &str, d_query: usize, d_self: usize| {
        store.insert(
            format!("{prefix}.{name}.q.w"),
            he_init(rng, &[d_query, d_self], d_query),
            trainable,
        );
        for p in ["k", "v"] {
            store.insert(
                format!("{prefix}.{name}.{p}.w"),
                he_init(rng, &[d_self, d_self], d_self),
                trainable,
            );
        }
        store.insert(
            format!("{prefix}.{name}.o.w"),
            Array::zeros(&[d_self, d_self]),
            trainable,
        );
    };
    block("con", motion_width, content_width);
    block("mot", content_width, motion_width);
}

/// One direction of the exchange: queries from the opposite stream,
/// keys/values from the stream being updated. Returns the update in the
/// kv stream's shape.
pub fn cross_attend<T: Scalar>(
    fwd: &Fwd<T>,
    block: &str,
    query_feats: &Tensor<T>,
    kv_feats: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (qs, ks) = (query_feats.shape(), kv_feats.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[1] != ks[1] {
        return config_err(format!(
            "cross attention needs aligned [N, S, D] sequences, got {qs:?} and {ks:?}"
        ));
    }
    mha(fwd, block, query_feats, kv_feats, heads, 0.0, None)
}

/// Simultaneous bidirectional update over token sequences
/// (`[N, S, width]` each). Both residual branches read the arguments, not
/// each other's results.
pub fn exchange<T: Scalar>(
    fwd: &Fwd<T>,
    prefix: &str,
    content: &Tensor<T>,
    motion: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let to_content = cross_attend(fwd, &format!("{prefix}.con"), motion, content, heads)?;
    let to_motion = cross_attend(fwd, &format!("{prefix}.mot"), content, motion, heads)?;
    Ok((content.add(&to_content)?, motion.add(&to_motion)?))
}

/// `[N, C, H, W]` feature map to `[N, H*W, C]` tokens.
pub fn spatial_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape()[..] else {
        return config_err(format!("expected [N, C, H, W], got {:?}", x.shape()));
    };
    Ok(x.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, c])?)
}

/// Inverse of `spatial_tokens`.
pub fn tokens_spatial<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, s, c] = t.shape()[..] else {
        return config_err(format!("expected [N, S, C], got {:?}", t.shape()));
    };
    if s != h * w {
        return config_err(format!("token count {s} does not cover {h}x{w}"));
    }
    Ok(t.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])?)
}

/// Exchange between the content stream's per-frame maps `[B*L, Cc, H, W]`
/// and the motion stream's volume `[B, Cm, L, H, W]`, pairing frame k
/// with frame k.
pub fn exchange_spatial<T: Scalar>(
    fwd: &Fwd<T>,
    prefix: &str,
    content: &Tensor<T>,
    motion: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [bl, _cc, hc, wc] = content.shape()[..] else {
        return config_err(format!(
            "content side expects [B*L, C, H, W], got {:?}",
            content.shape()
        ));
    };
    let [b, cm, l, h, w] = motion.shape()[..] else {
        return config_err(format!(
            "motion side expects [B, C, L, H, W], got {:?}",
            motion.shape()
        ));
    };
    if bl != b * l || hc != h || wc != w {
        return config_err(format!(
            "stream geometries disagree: content {:?} vs motion {:?}",
            content.shape(),
            motion.shape()
        ));
    }
    let con_tok = spatial_tokens(content)?;
    let mot_tok = spatial_tokens(
        &motion
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[b * l, cm, h, w])?,
    )?;
    let (uc, um) = exchange(fwd, prefix, &con_tok, &mot_tok, heads)?;
    let content_out = tokens_spatial(&uc, h, w)?;
    let motion_out = tokens_spatial(&um, h, w)?
        .reshape(&[b, l, cm, h, w])?
        .permute(&[0, 2, 1, 3, 4])?;
    Ok((content_out, motion_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsdn_core::Graph;
    use rand::SeedableRng;

    fn fresh_store(seed: u64, cw: usize, mw: usize) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_exchange_params(&mut store, &mut rng, "x", cw, mw, true);
        store
    }

    /// Replace the zero output projections with random ones so the
    /// exchange actually moves features.
    fn activate(store: &mut ParamStore<f32>, seed: u64, cw: usize, mw: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.get_mut("x.con.o.w").unwrap().value = Array::randn(&mut rng, &[cw, cw]);
        store.get_mut("x.mot.o.w").unwrap().value = Array::randn(&mut rng, &[mw, mw]);
    }

    #[test]
    fn fresh_exchange_is_bitwise_identity() {
        let store = fresh_store(0, 8, 6);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c_arr = Array::<f32>::randn(&mut rng, &[2, 5, 8]);
        let m_arr = Array::<f32>::randn(&mut rng, &[2, 5, 6]);
        let (uc, um) = exchange(&fwd, "x", &g.constant(&c_arr), &g.constant(&m_arr), 2).unwrap();
        for (got, want) in [(uc.value(), c_arr), (um.value(), m_arr)] {
            for (a, b) in got.data().iter().zip(want.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn both_evaluation_orders_agree_bitwise() {
        let mut store = fresh_store(2, 6, 6);
        activate(&mut store, 3, 6, 6);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = g.constant(&Array::<f32>::randn(&mut rng, &[1, 4, 6]));
        let m = g.constant(&Array::<f32>::randn(&mut rng, &[1, 4, 6]));
        // Content direction first.
        let a1 = cross_attend(&fwd, "x.con", &m, &c, 2).unwrap();
        let a2 = cross_attend(&fwd, "x.mot", &c, &m, 2).unwrap();
        // Motion direction first, rebuilt on a fresh graph.
        let g2 = Graph::new();
        let fwd2 = Fwd::new(&g2, &store, false);
        let c2 = g2.constant(&c.value());
        let m2 = g2.constant(&m.value());
        let b2 = cross_attend(&fwd2, "x.mot", &c2, &m2, 2).unwrap();
        let b1 = cross_attend(&fwd2, "x.con", &m2, &c2, 2).unwrap();
        for (x, y) in [(a1, b1), (a2, b2)] {
            for (p, q) in x.value().data().iter().zip(y.value().data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn exchange_matches_two_call_composition() {
        let mut store = fresh_store(5, 6, 4);
        activate(&mut store, 6, 6, 4);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = g.constant(&Array::<f32>::randn(&mut rng, &[2, 3, 6]));
        let m = g.constant(&Array::<f32>::randn(&mut rng, &[2, 3, 4]));
        let (uc, um) = exchange(&fwd, "x", &c, &m, 2).unwrap();
        let want_c = c
            .add(&cross_attend(&fwd, "x.con", &m, &c, 2).unwrap())
            .unwrap();
        let want_m = m
            .add(&cross_attend(&fwd, "x.mot", &c, &m, 2).unwrap())
            .unwrap();
        assert!(uc.value().max_abs_diff(&want_c.value()) <= 1e-6);
        assert!(um.value().max_abs_diff(&want_m.value()) <= 1e-6);
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        // With zero motion features every content token receives the same
        // update: the unweighted mean over value projections.
        let mut store = fresh_store(8, 6, 4);
        activate(&mut store, 9, 6, 4);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = g.constant(&Array::<f32>::randn(&mut rng, &[1, 5, 6]));
        let m = g.constant(&Array::<f32>::zeros(&[1, 5, 4]));
        let upd = cross_attend(&fwd, "x.con", &m, &c, 2).unwrap().value();
        let d = 6;
        for row in 1..5 {
            for j in 0..d {
                assert!(
                    (upd.data()[row * d + j] - upd.data()[j]).abs() <= 1e-6,
                    "row {row} differs from row 0"
                );
            }
        }
    }

    #[test]
    fn kv_permutation_leaves_output_unchanged() {
        let mut store = fresh_store(11, 6, 4);
        activate(&mut store, 12, 6, 4);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q_arr = Array::<f32>::randn(&mut rng, &[1, 4, 4]);
        let kv_arr = Array::<f32>::randn(&mut rng, &[1, 4, 6]);
        let mut shuffled = kv_arr.clone();
        let perm = [2usize, 0, 3, 1];
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..6 {
                shuffled.data_mut()[dst * 6 + j] = kv_arr.data()[src * 6 + j];
            }
        }
        let base = cross_attend(&fwd, "x.con", &g.constant(&q_arr), &g.constant(&kv_arr), 2)
            .unwrap()
            .value();
        let perd = cross_attend(&fwd, "x.con", &g.constant(&q_arr), &g.constant(&shuffled), 2)
            .unwrap()
            .value();
        assert!(base.max_abs_diff(&perd) <= 1e-6);
    }

    #[test]
    fn query_permutation_permutes_output_rows() {
        let mut store = fresh_store(14, 6, 4);
        activate(&mut store, 15, 6, 4);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q_arr = Array::<f32>::randn(&mut rng, &[1, 3, 4]);
        let kv = g.constant(&Array::<f32>::randn(&mut rng, &[1, 3, 6]));
        let mut q_rev = q_arr.clone();
        for i in 0..3 {
            for j in 0..4 {
                q_rev.data_mut()[i * 4 + j] = q_arr.data()[(2 - i) * 4 + j];
            }
        }
        let base = cross_attend(&fwd, "x.con", &g.constant(&q_arr), &kv, 2)
            .unwrap()
            .value();
        let rev = cross_attend(&fwd, "x.con", &g.constant(&q_rev), &kv, 2)
            .unwrap()
            .value();
        for i in 0..3 {
            for j in 0..6 {
                let a = base.data()[i * 6 + j];
                let b = rev.data()[(2 - i) * 6 + j];
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn token_layout_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x_arr = Array::<f32>::randn(&mut rng, &[2, 3, 4, 5]);
        let g = Graph::<f32>::new();
        let x = g.constant(&x_arr);
        let back = tokens_spatial(&spatial_tokens(&x).unwrap(), 4, 5)
            .unwrap()
            .value();
        for (a, b) in back.data().iter().zip(x_arr.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn spatial_exchange_preserves_both_layouts() {
        let store = fresh_store(18, 6, 4);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let c_arr = Array::<f32>::randn(&mut rng, &[6, 6, 4, 4]);
        let m_arr = Array::<f32>::randn(&mut rng, &[2, 4, 3, 4, 4]);
        let (uc, um) = exchange_spatial(&fwd, "x", &g.constant(&c_arr), &g.constant(&m_arr), 2)
            .unwrap();
        assert_eq!(uc.shape(), &[6, 6, 4, 4]);
        assert_eq!(um.shape(), &[2, 4, 3, 4, 4]);
        // Zero-init site: values survive the layout round trip bit for bit.
        for (got, want) in [(uc.value(), c_arr), (um.value(), m_arr)] {
            for (a, b) in got.data().iter().zip(want.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let store = fresh_store(20, 6, 4);
        let g = Graph::new();
        let fwd = Fwd::new(&g, &store, false);
        let c = g.constant(&Array::<f32>::zeros(&[4, 6, 4, 4]));
        let m = g.constant(&Array::<f32>::zeros(&[2, 4, 3, 4, 4]));
        // 4 != 2*3 frame rows.
        assert!(exchange_spatial(&fwd, "x", &c, &m, 2).is_err());
        let q = g.constant(&Array::<f32>::zeros(&[1, 3, 4]));
        let kv = g.constant(&Array::<f32>::zeros(&[1, 5, 6]));
        assert!(cross_attend(&fwd, "x.con", &q, &kv, 2).is_err());
    }
}

//! Finite-difference validation for whole networks.
//!
//! The engine's own checker probes individual ops; this one probes a loss
//! computed through a parameter store, so it covers the composition of a
//! real forward pass: parameter binding, weight sharing, and every op on
//! the path. Run it in f64; f32 drowns central differences in rounding
//! noise.

use crate::error::Result;
use crate::params::{Fwd, ParamStore};
use dsdn_core::gradcheck::rel_err;
use dsdn_core::graph::Tensor;
use dsdn_core::Graph;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of a store-level gradient probe.
#[derive(Debug, Clone)]
pub struct StoreCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

impl StoreCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` must rebuild the forward pass from scratch on the `Fwd` it is
/// given and return a scalar tensor. Up to `per_param` coordinates of each
/// trainable parameter are probed (all of them when `per_param` covers the
/// tensor), chosen by `seed`. The store is restored to its original
/// values before returning.
pub fn check_store<F>(
    store: &mut ParamStore<f64>,
    loss_fn: F,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<StoreCheck>
where
    F: Fn(&Fwd<f64>) -> Result<Tensor<f64>>,
{
    let grads = {
        let g = Graph::new();
        let fwd = Fwd::new(&g, store, true);
        let loss = loss_fn(&fwd)?;
        g.backward(&loss)?;
        fwd.grads()
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let fwd = Fwd::new(&g, store, false);
        Ok(loss_fn(&fwd)?.item()?)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = StoreCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    let names: Vec<String> = store.trainable_names();
    for name in names {
        let n = store.get(&name).expect("listed param").value.data().len();
        let mut coords: Vec<usize> = (0..n).collect();
        if per_param < n {
            coords.shuffle(&mut rng);
            coords.truncate(per_param);
        }
        let analytic = grads
            .get(&name)
            .cloned()
            .unwrap_or_else(|| dsdn_core::Array::zeros(store.get(&name).unwrap().value.shape()));
        for i in coords {
            let orig = store.get(&name).unwrap().value.data()[i];
            store.get_mut(&name).unwrap().value.data_mut()[i] = orig + eps;
            let up = eval(store)?;
            store.get_mut(&name).unwrap().value.data_mut()[i] = orig - eps;
            let down = eval(store)?;
            store.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(analytic.data()[i], numeric);
            worst.coords_checked += 1;
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(worst)
}

/// Probes the assembled dual-stream forward pass in f64: both denoising
/// nets with exchange active, adapters live, and the motion-op
/// round-trip, all through one scalar loss. Every trainable parameter
/// gets up to `per_param` coordinates compared against central
/// differences.
pub fn full_model_check(per_param: usize, seed: u64) -> Result<StoreCheck> {
    use crate::config::Config;
    use crate::model::{DsdnModel, PredictOpts};
    use crate::motion::{combine, decompose};
    use crate::text::Vocab;
    use dsdn_core::Array;

    let mut cfg = Config::default();
    cfg.latent_channels = 4;
    cfg.latent_size = 4;
    cfg.canvas = 16;
    cfg.frames = 2;
    cfg.content_width = 4;
    cfg.motion_width = 4;
    cfg.heads = 2;
    cfg.gn_groups = 2;
    cfg.temb_dim = 4;
    cfg.temb_hidden = 6;
    cfg.rank = 1;
    cfg.r_c = 2;
    cfg.text_dim = 4;
    cfg.text_layers = 1;
    cfg.text_heads = 2;
    cfg.text_ffn = 6;
    cfg.max_len = 6;
    cfg.t_steps = 10;
    cfg.init_seed = seed;

    let model = DsdnModel::<f64>::init(&cfg)?;
    let mut store = model.store.clone();
    // Exchange projections start at zero, which would hide their
    // gradients behind the residual; give every trainable tensor a live
    // value so each path carries signal.
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for name in store.trainable_names() {
        let p = store.get_mut(&name).expect("listed param");
        let bump = crate::params::scaled_randn::<f64>(&mut wrng, p.value.shape(), 0.05);
        let merged: Vec<f64> = p
            .value
            .data()
            .iter()
            .zip(bump.data())
            .map(|(a, b)| a + b)
            .collect();
        p.value = Array::new(p.value.shape().to_vec(), merged)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Array::<f64>::randn(&mut rng, &[1, 2, 4, 4, 4]);
    let zt = Array::<f64>::randn(&mut rng, &[1, 2, 4, 4, 4]);
    let ts = vec![3usize];
    let ids = vec![Vocab::corpus().tokenize("a red square moving right", cfg.max_len)];

    check_store(
        &mut store,
        |fwd| {
            let g = fwd.graph;
            let (ec, em) = model.predict(
                fwd,
                &g.constant(&z),
                &g.constant(&zt),
                &ts,
                &ids,
                &PredictOpts::default(),
            )?;
            let em = em.expect("motion on");
            let zc = g.constant(&z);
            let m = decompose(fwd, "mops", &zc)?;
            let recon = combine(fwd, "mops", &zc, &m)?;
            let diff = recon.sub(&zc)?;
            // The 1/8 is a lossless mantissa shift: every relative error
            // is preserved exactly, but the forward pass's accumulated
            // rounding noise (which FD divides by 2*eps) lands well
            // below the comparison floor for near-zero gradients.
            Ok(ec
                .mul(&ec)?
                .mean_all()
                .add(&em.mul(&em)?.mean_all())?
                .add(&diff.mul(&diff)?.mean_all())?
                .scale(0.125))
        },
        1e-5,
        per_param,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsdn_core::Array;

    #[test]
    fn quadratic_loss_matches_exactly() {
        let mut store = ParamStore::new();
        store.insert(
            "w",
            Array::new(vec![3], vec![0.5_f64, -1.2, 2.0]).unwrap(),
            true,
        );
        let report = check_store(
            &mut store,
            |fwd| {
                let w = fwd.p("w")?;
                Ok(w.mul(&w)?.sum_all())
            },
            1e-5,
            16,
            0,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 3);
        assert!(report.passed(1e-6), "{report:?}");
    }

    #[test]
    fn gradient_mismatch_is_caught() {
        // Negative control: with a deliberately huge eps the central
        // difference of w^3 picks up the eps^2 curvature term, so the
        // probe must report a visible error rather than rubber-stamping.
        let mut store = ParamStore::new();
        store.insert("w", Array::new(vec![1], vec![1.5_f64]).unwrap(), true);
        let report = check_store(
            &mut store,
            |fwd| {
                let w = fwd.p("w")?;
                Ok(w.mul(&w)?.mul(&w)?.sum_all())
            },
            1.0,
            4,
            0,
        )
        .unwrap();
        assert!(!report.passed(1e-2), "{report:?}");
    }

    #[test]
    fn store_values_are_restored() {
        let mut store = ParamStore::new();
        store.insert("w", Array::new(vec![2], vec![1.0_f64, 2.0]).unwrap(), true);
        let before = store.get("w").unwrap().value.clone();
        check_store(
            &mut store,
            |fwd| Ok(fwd.p("w")?.sum_all()),
            1e-5,
            8,
            1,
        )
        .unwrap();
        let after = &store.get("w").unwrap().value;
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn assembled_model_gradients_match() {
        let report = full_model_check(1, 7).unwrap();
        assert!(
            report.passed(1e-4),
            "worst {} at {}",
            report.max_rel_err,
            report.worst_param
        );
        assert!(report.coords_checked > 100);
    }
}


//! Full dual-stream denoiser: the frame-wise content net and volumetric
//! motion net evaluated side by side, trading features at four exchange
//! sites (after the down blocks and after the up blocks, at both
//! resolutions). The bottleneck has no exchange.
//!
//! Initialization draws every weight from one seeded stream in a fixed
//! code order; reordering init calls is a breaking change to checkpoint
//! and sampling reproducibility.

use crate::config::Config;
use crate::error::{config_err, Result};
use crate::interact::{exchange_spatial, init_exchange_params};
use crate::motion::init_motion_params;
use crate::params::{Fwd, ParamStore};
use crate::schedule::time_embedding;
use crate::stream_rng;
use crate::text::{encode_text, init_text_params, pad_mask, Vocab};
use crate::unet2d::{
    content_block, content_down, content_head, content_stem, content_up, init_content_params,
    temb_mlp,
};
use crate::unet3d::{
    init_motion_net_params, motion_block, motion_down, motion_head, motion_stem, motion_up,
};
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Graph, Scalar};

/// Which optional paths run during a prediction.
#[derive(Debug, Clone, Copy)]
pub struct PredictOpts {
    /// Cross-stream exchange sites active.
    pub interaction: bool,
    /// Motion stream evaluated at all.
    pub motion: bool,
    /// Content adapters active (off forces their scale to zero).
    pub adapter: bool,
}

impl Default for PredictOpts {
    fn default() -> Self {
        PredictOpts {
            interaction: true,
            motion: true,
            adapter: true,
        }
    }
}

/// The trained object: parameter store plus the pieces of config that
/// define its architecture.
#[derive(Debug, Clone)]
pub struct DsdnModel<T: Scalar> {
    pub store: ParamStore<T>,
    pub vocab: Vocab,
    pub cfg: Config,
}

impl<T: Scalar> DsdnModel<T> {
    /// Builds a fresh model. Weight draw order: content net, motion net,
    /// motion ops, the four exchange sites (down 16, down 8, up 8,
    /// up 16), then the text encoder.
    pub fn init(cfg: &Config) -> Result<DsdnModel<T>> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.init_seed, 0);
        let mut store = ParamStore::new();
        init_content_params(&mut store, &mut rng, "con", cfg);
        init_motion_net_params(&mut store, &mut rng, "mot", cfg);
        init_motion_params(
            &mut store,
            &mut rng,
            "mops",
            cfg.model_channels(),
            cfg.r_c,
        )?;
        let (w1, w2) = (cfg.content_width, cfg.content_width * 2);
        let (m1, m2) = (cfg.motion_width, cfg.motion_width * 2);
        for (site, cw, mw) in [
            ("x16d", w1, m1),
            ("x8d", w2, m2),
            ("x8u", w2, m2),
            ("x16u", w1, m1),
        ] {
            init_exchange_params(&mut store, &mut rng, &format!("xch.{site}"), cw, mw, true);
        }
        let vocab = Vocab::corpus();
        init_text_params(
            &mut store,
            &mut rng,
            "txt",
            vocab.len(),
            cfg.max_len,
            cfg.text_dim,
            cfg.text_layers,
            cfg.text_ffn,
            true,
        );
        Ok(DsdnModel {
            store,
            vocab,
            cfg: cfg.clone(),
        })
    }

    /// Predicts the noise in both streams for a batch.
    ///
    /// `z_t` and `zt_t` are frame-major `[B, L, C, H, W]`; `ts` holds one
    /// 1-based timestep per batch entry; `ids` one tokenized prompt per
    /// entry. The motion prediction is `None` when the motion stream is
    /// disabled. With interaction off, content frames are processed fully
    /// independently.
    pub fn predict(
        &self,
        fwd: &Fwd<T>,
        z_t: &Tensor<T>,
        zt_t: &Tensor<T>,
        ts: &[usize],
        ids: &[Vec<usize>],
        opts: &PredictOpts,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let cfg = &self.cfg;
        let [b, l, c, h, w] = z_t.shape()[..] else {
            return config_err(format!("latents must be [B,L,C,H,W], got {:?}", z_t.shape()));
        };
        if opts.motion && zt_t.shape() != z_t.shape() {
            return config_err(format!(
                "stream latents disagree: {:?} vs {:?}",
                z_t.shape(),
                zt_t.shape()
            ));
        }
        if ts.len() != b || ids.len() != b {
            return config_err(format!(
                "batch of {b} latents with {} timesteps and {} prompts",
                ts.len(),
                ids.len()
            ));
        }
        for &t in ts {
            if t < 1 || t > cfg.t_steps {
                return config_err(format!("timestep {t} outside 1..={}", cfg.t_steps));
            }
        }
        let exchange_on = opts.interaction && opts.motion;
        let lambda = if opts.adapter { cfg.lambda } else { 0.0 };
        let (heads, gn) = (cfg.heads, cfg.gn_groups);

        // Conditioning, computed once per batch entry and repeated per
        // frame for the frame-wise content net.
        let text = encode_text(fwd, "txt", ids, cfg.text_heads)?;
        let mask = pad_mask::<T>(ids)?;
        let s = text.shape()[1];
        let d = text.shape()[2];
        let repeat: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(l)).collect();
        let text_f = text
            .reshape(&[b, s * d])?
            .gather_rows(&repeat)?
            .reshape(&[b * l, s, d])?;
        let mut mask_f_data = Vec::with_capacity(b * l * s);
        for row in 0..b {
            for _ in 0..l {
                mask_f_data.extend_from_slice(&mask.data()[row * s..(row + 1) * s]);
            }
        }
        let mask_f = Array::new(vec![b * l, s], mask_f_data)?;

        let temb = fwd
            .graph
            .constant(&time_embedding::<T>(ts, cfg.temb_dim)?);
        let temb_f = temb
            .gather_rows(&repeat)?
            .reshape(&[b * l, cfg.temb_dim])?;
        let ct = temb_mlp(fwd, "con", &temb_f)?;
        let zc = z_t.reshape(&[b * l, c, h, w])?;

        // Content encoder half.
        let mut cd1 = content_block(
            fwd,
            "con.d1",
            &content_stem(fwd, "con", &zc)?,
            &ct,
            &text_f,
            &mask_f,
            heads,
            gn,
            lambda,
        )?;

        let mut motion_state = if opts.motion {
            let mt = temb_mlp(fwd, "mot", &temb)?;
            let zm = zt_t.permute(&[0, 2, 1, 3, 4])?;
            let md1 = motion_block(
                fwd,
                "mot.d1",
                &motion_stem(fwd, "mot", &zm)?,
                &mt,
                &text,
                &mask,
                heads,
                gn,
            )?;
            Some((md1, mt))
        } else {
            None
        };

        if exchange_on {
            let (md1, mt) = motion_state.take().expect("motion on");
            let (c2, m2) = exchange_spatial(fwd, "xch.x16d", &cd1, &md1, heads)?;
            cd1 = c2;
            motion_state = Some((m2, mt));
        }

        let mut cd2 = content_block(
            fwd,
            "con.d2",
            &content_down(fwd, "con", &cd1)?,
            &ct,
            &text_f,
            &mask_f,
            heads,
            gn,
            lambda,
        )?;
        let mut motion_d2 = match &motion_state {
            Some((md1, mt)) => Some(motion_block(
                fwd,
                "mot.d2",
                &motion_down(fwd, "mot", md1)?,
                mt,
                &text,
                &mask,
                heads,
                gn,
            )?),
            None => None,
        };
        if exchange_on {
            let (c2, m2) =
                exchange_spatial(fwd, "xch.x8d", &cd2, motion_d2.as_ref().expect("motion on"), heads)?;
            cd2 = c2;
            motion_d2 = Some(m2);
        }

        // Bottleneck (no exchange) and decoder halves.
        let cmid = content_block(fwd, "con.mid", &cd2, &ct, &text_f, &mask_f, heads, gn, lambda)?;
        let mut cu2 = content_block(
            fwd,
            "con.u2",
            &Graph::concat(&[&cmid, &cd2], 1)?,
            &ct,
            &text_f,
            &mask_f,
            heads,
            gn,
            lambda,
        )?;
        let mut motion_u2 = match (&motion_state, &motion_d2) {
            (Some((_, mt)), Some(md2)) => {
                let mmid = motion_block(fwd, "mot.mid", md2, mt, &text, &mask, heads, gn)?;
                Some(motion_block(
                    fwd,
                    "mot.u2",
                    &Graph::concat(&[&mmid, md2], 1)?,
                    mt,
                    &text,
                    &mask,
                    heads,
                    gn,
                )?)
            }
            _ => None,
        };
        if exchange_on {
            let (c2, m2) =
                exchange_spatial(fwd, "xch.x8u", &cu2, motion_u2.as_ref().expect("motion on"), heads)?;
            cu2 = c2;
            motion_u2 = Some(m2);
        }

        let mut cu1 = content_block(
            fwd,
            "con.u1",
            &Graph::concat(&[&content_up(fwd, "con", &cu2)?, &cd1], 1)?,
            &ct,
            &text_f,
            &mask_f,
            heads,
            gn,
            lambda,
        )?;
        let mut motion_u1 = match (&motion_state, &motion_u2) {
            (Some((md1, mt)), Some(mu2)) => Some(motion_block(
                fwd,
                "mot.u1",
                &Graph::concat(&[&motion_up(fwd, "mot", mu2)?, md1], 1)?,
                mt,
                &text,
                &mask,
                heads,
                gn,
            )?),
            _ => None,
        };
        if exchange_on {
            let (c2, m2) =
                exchange_spatial(fwd, "xch.x16u", &cu1, motion_u1.as_ref().expect("motion on"), heads)?;
            cu1 = c2;
            motion_u1 = Some(m2);
        }

        let eps_con = content_head(fwd, "con", &cu1, gn)?.reshape(&[b, l, c, h, w])?;
        let eps_mot = match motion_u1 {
            Some(mu1) => Some(
                motion_head(fwd, "mot", &mu1, gn)?
                    .permute(&[0, 2, 1, 3, 4])?,
            ),
            None => None,
        };
        Ok((eps_con, eps_mot))
    }
}

/// Element-mean squared error between two same-shaped tensors.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let diff = pred.sub(target)?;
    Ok(diff.mul(&diff)?.mean_all())
}

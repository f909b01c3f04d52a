//! Frame-wise pixel/latent codec.
//!
//! Two modes share one interface. `identity` is a literal row-major
//! reshape of each RGB frame into `[C, h, w]` (no parameters, exact
//! round trip) for pure-latent testing. `learned` is a small strided
//! conv autoencoder trained on the synthetic corpus, then frozen; its
//! latents are rescaled by a stored factor so downstream diffusion sees
//! roughly unit-variance inputs.
//!
//! Both modes are strictly per-frame: frame k's latent is a function of
//! frame k alone, so encode/decode commute with frame permutation.

use crate::checkpoint::{fill_store, Container};
use crate::config::{CodecMode, Config};
use crate::data::Clip;
use crate::error::{config_err, state_err, AppError, Result};
use crate::optim::Adam;
use crate::params::{he_init, Fwd, ParamStore};
use crate::stream_rng;
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Graph};
use rand::seq::SliceRandom;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Codec {
    pub mode: CodecMode,
    pub store: ParamStore<f32>,
    /// Multiplier applied to encoder outputs (and divided back out before
    /// decoding); measured once after training.
    pub latent_scale: f32,
    pub trained: bool,
    pub canvas: usize,
    pub latent_size: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct CodecReport {
    pub epoch_losses: Vec<f64>,
    pub halted_early: bool,
}

impl Codec {
    pub fn init(cfg: &Config) -> Codec {
        let mut store = ParamStore::new();
        let w = cfg.codec_width;
        let c = cfg.model_channels();
        if cfg.codec_mode == CodecMode::Learned {
            let mut rng = stream_rng(cfg.init_seed, 1);
            let conv = |rng: &mut _, o: usize, i: usize| he_init::<f32>(rng, &[o, i, 3, 3], i * 9);
            for (name, o, i) in [
                ("enc.c1", w, 3),
                ("enc.c2", 2 * w, w),
                ("enc.c3", c, 2 * w),
                ("dec.c1", 2 * w, c),
                ("dec.c2", w, 2 * w),
                ("dec.c3", w, w),
                ("dec.c4", 3, w),
            ] {
                store.insert(format!("{name}.w"), conv(&mut rng, o, i), true);
                store.insert(format!("{name}.b"), Array::zeros(&[o]), true);
            }
        }
        Codec {
            mode: cfg.codec_mode,
            store,
            latent_scale: 1.0,
            trained: cfg.codec_mode == CodecMode::Identity,
            canvas: cfg.canvas,
            latent_size: cfg.latent_size,
            channels: c,
        }
    }

    fn check_frames(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.canvas || shape[3] != self.canvas {
            return config_err(format!(
                "expected frames [N, 3, {0}, {0}], got {shape:?}",
                self.canvas
            ));
        }
        Ok(())
    }

    fn check_latents(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4
            || shape[1] != self.channels
            || shape[2] != self.latent_size
            || shape[3] != self.latent_size
        {
            return config_err(format!(
                "expected latents [N, {}, {1}, {1}], got {shape:?}",
                self.channels, self.latent_size
            ));
        }
        Ok(())
    }

    /// Encode a batch of frames `[N, 3, cv, cv]` to latents `[N, C, h, w]`.
    pub fn encode_frames(&self, frames: &Array<f32>) -> Result<Array<f32>> {
        self.check_frames(frames.shape())?;
        let n = frames.shape()[0];
        match self.mode {
            CodecMode::Identity => frames
                .clone()
                .reshaped(&[n, self.channels, self.latent_size, self.latent_size])
                .map_err(Into::into),
            CodecMode::Learned => {
                if !self.trained {
                    return state_err("learned codec is untrained; run train-codec first");
                }
                let g = Graph::new();
                let fwd = Fwd::new(&g, &self.store, false);
                let z = enc_pass(&fwd, &g.constant(frames))?;
                Ok(z.value().map(|v| v * self.latent_scale))
            }
        }
    }

    /// Decode latents `[N, C, h, w]` back to frames `[N, 3, cv, cv]`,
    /// clamped to [0, 1].
    pub fn decode_frames(&self, latents: &Array<f32>) -> Result<Array<f32>> {
        self.check_latents(latents.shape())?;
        let n = latents.shape()[0];
        match self.mode {
            CodecMode::Identity => Ok(latents
                .map(|v| v.clamp(0.0, 1.0))
                .reshaped(&[n, 3, self.canvas, self.canvas])?),
            CodecMode::Learned => {
                if !self.trained {
                    return state_err("learned codec is untrained; run train-codec first");
                }
                let unscaled = latents.map(|v| v / self.latent_scale);
                let g = Graph::new();
                let fwd = Fwd::new(&g, &self.store, false);
                let x = dec_pass(&fwd, &g.constant(&unscaled))?;
                Ok(x.value().map(|v| v.clamp(0.0, 1.0)))
            }
        }
    }

    /// Encode one clip to `[L, C, h, w]`.
    pub fn encode_video(&self, clip: &Clip) -> Result<Array<f32>> {
        let l = clip.frames.len();
        let mut data = Vec::with_capacity(l * 3 * self.canvas * self.canvas);
        for f in &clip.frames {
            data.extend_from_slice(f);
        }
        let frames = Array::new(vec![l, 3, self.canvas, self.canvas], data)?;
        self.encode_frames(&frames)
    }

    /// Decode `[L, C, h, w]` to per-frame RGB planes in [0, 1].
    pub fn decode_video(&self, latents: &Array<f32>) -> Result<Vec<Vec<f32>>> {
        let frames = self.decode_frames(latents)?;
        let l = frames.shape()[0];
        let stride = 3 * self.canvas * self.canvas;
        Ok((0..l)
            .map(|k| frames.data()[k * stride..(k + 1) * stride].to_vec())
            .collect())
    }

    /// Encode a whole corpus, batched over frames. Returns one
    /// `[L, C, h, w]` array per clip.
    pub fn encode_corpus(&self, clips: &[Clip]) -> Result<Vec<Array<f32>>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(4) {
            let l = chunk[0].frames.len();
            let mut data = Vec::new();
            for clip in chunk {
                for f in &clip.frames {
                    data.extend_from_slice(f);
                }
            }
            let n = chunk.len() * l;
            let frames = Array::new(vec![n, 3, self.canvas, self.canvas], data)?;
            let z = self.encode_frames(&frames)?;
            let per = z.numel() / chunk.len();
            let lat_shape = vec![l, self.channels, self.latent_size, self.latent_size];
            for (i, _) in chunk.iter().enumerate() {
                out.push(Array::new(
                    lat_shape.clone(),
                    z.data()[i * per..(i + 1) * per].to_vec(),
                )?);
            }
        }
        Ok(out)
    }

    /// Writes the codec to a standalone container so a pretraining run's
    /// output can be handed to later stages. The config it was built under
    /// rides along; `load` rebuilds the skeleton from that and only copies
    /// values in, so structure always comes from code.
    pub fn save(&self, cfg: &Config, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.put_text("__config", &cfg.canonical_string())?;
        c.put_tensor("__scale", &Array::new(vec![1], vec![self.latent_scale])?)?;
        c.put_u64("__trained", self.trained as u64)?;
        for (name, p) in self.store.iter() {
            c.put_tensor(name, &p.value)?;
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<(Codec, Config)> {
        let c = Container::load(path)?;
        let cfg = Config::parse(&c.text("__config")?)?;
        cfg.validate()?;
        let mut codec = Codec::init(&cfg);
        fill_store(&c, &mut codec.store, "")?;
        let scale: Array<f32> = c.tensor("__scale")?;
        codec.latent_scale = scale.data()[0];
        codec.trained = c.u64("__trained")? != 0;
        Ok((codec, cfg))
    }

    /// Mean per-pixel squared reconstruction error over clips.
    pub fn reconstruction_mse(&self, clips: &[Clip]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for clip in clips {
            let z = self.encode_video(clip)?;
            let back = self.decode_video(&z)?;
            for (orig, rec) in clip.frames.iter().zip(&back) {
                for (a, b) in orig.iter().zip(rec) {
                    let d = (a - b) as f64;
                    total += d * d;
                }
                count += orig.len();
            }
        }
        Ok(total / count.max(1) as f64)
    }
}

fn conv(fwd: &Fwd<f32>, name: &str, x: &Tensor<f32>, stride: usize) -> Result<Tensor<f32>> {
    Ok(x.conv2d(
        &fwd.p(&format!("{name}.w"))?,
        Some(&fwd.p(&format!("{name}.b"))?),
        (stride, stride),
        (1, 1),
        1,
    )?)
}

fn enc_pass(fwd: &Fwd<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let h = conv(fwd, "enc.c1", x, 2)?.silu();
    let h = conv(fwd, "enc.c2", &h, 2)?.silu();
    conv(fwd, "enc.c3", &h, 1)
}

fn dec_pass(fwd: &Fwd<f32>, z: &Tensor<f32>) -> Result<Tensor<f32>> {
    let h = conv(fwd, "dec.c1", z, 1)?.silu();
    let h = conv(fwd, "dec.c2", &h.upsample_nearest2d(2)?, 1)?.silu();
    let h = conv(fwd, "dec.c3", &h.upsample_nearest2d(2)?, 1)?.silu();
    conv(fwd, "dec.c4", &h, 1)
}

/// Pretrain on every frame of the corpus, then freeze and measure the
/// latent rescaling factor. Halts early (with the report saying so) if an
/// epoch's mean loss fails to improve on the previous epoch's.
pub fn train_codec(cfg: &Config, clips: &[Clip]) -> Result<(Codec, CodecReport)> {
    if clips.is_empty() {
        return config_err("codec training needs a non-empty corpus");
    }
    let mut codec = Codec::init(cfg);
    if codec.mode == CodecMode::Identity {
        return Ok((
            codec,
            CodecReport {
                epoch_losses: vec![0.0],
                halted_early: false,
            },
        ));
    }

    let cv = cfg.canvas;
    let mut frames: Vec<&[f32]> = Vec::new();
    for clip in clips {
        for f in &clip.frames {
            frames.push(f);
        }
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut rng = stream_rng(cfg.train_seed, 1);
    let mut opt = Adam::<f32>::new(cfg.codec_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut epoch_losses = Vec::with_capacity(cfg.codec_epochs);
    let mut halted_early = false;

    'epochs: for epoch in 0..cfg.codec_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.codec_batch) {
            let mut data = Vec::with_capacity(batch.len() * 3 * cv * cv);
            for &i in batch {
                data.extend_from_slice(frames[i]);
            }
            let x = Array::new(vec![batch.len(), 3, cv, cv], data)?;
            let g = Graph::new();
            let fwd = Fwd::new(&g, &codec.store, true);
            let xc = g.constant(&x);
            let recon = dec_pass(&fwd, &enc_pass(&fwd, &xc)?)?;
            let diff = recon.sub(&xc)?;
            let loss = diff.mul(&diff)?.mean_all();
            let loss_val = loss.item()?.into();
            if !f64::is_finite(loss_val) {
                return Err(AppError::Training(format!(
                    "codec loss became non-finite at epoch {epoch}, batch {batches}: {loss_val}"
                )));
            }
            g.backward(&loss)?;
            let grads = fwd.grads();
            opt.step(&mut codec.store, &grads);
            sum += loss_val;
            batches += 1;
        }
        let mean = sum / batches as f64;
        if let Some(&prev) = epoch_losses.last() {
            if mean >= prev {
                epoch_losses.push(mean);
                halted_early = true;
                break 'epochs;
            }
        }
        epoch_losses.push(mean);
    }

    for name in codec.store.trainable_names() {
        codec.store.get_mut(&name).unwrap().trainable = false;
    }
    codec.trained = true;

    // Unit-variance rescaling, measured on raw (pre-scale) latents.
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    let mut n = 0usize;
    for clip in clips {
        let z = codec.encode_video(clip)?;
        for &v in z.data() {
            sum += v as f64;
            sumsq += (v as f64) * (v as f64);
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(1e-12);
    codec.latent_scale = (1.0 / var.sqrt()) as f32;

    Ok((codec, CodecReport { epoch_losses, halted_early }))
}

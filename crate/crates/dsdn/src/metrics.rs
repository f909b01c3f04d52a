//! Evaluation metrics over generated videos: frame-to-frame consistency
//! and frame-to-prompt alignment, both cosine similarities in an
//! embedding space learned contrastively on the synthetic corpus.
//!
//! The embedder shares no parameters with the generator it scores. Its
//! image side is a small strided conv stack, the text side its own
//! transformer encoder; both project to unit-norm vectors of the same
//! dimension.

use crate::attention::linear_bias;
use crate::checkpoint::{fill_store, Container};
use crate::config::Config;
use crate::data::Clip;
use crate::error::{config_err, state_err, Result};
use crate::optim::Adam;
use crate::params::{he_init, Fwd, ParamStore};
use crate::stream_rng;
use crate::text::{encode_text, init_text_params, Vocab, PAD};
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Graph};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

/// Caption pairs per contrastive batch (capped by the number of distinct
/// captions in the corpus).
const BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct Embedder {
    pub store: ParamStore<f32>,
    pub vocab: Vocab,
    pub trained: bool,
    pub canvas: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    text_heads: usize,
}

impl Embedder {
    /// Fresh weights; draw order is the image tower then the text tower.
    pub fn init(cfg: &Config) -> Result<Embedder> {
        if cfg.canvas % 8 != 0 {
            return config_err(format!(
                "canvas {} must be divisible by 8 for the three strided convs",
                cfg.canvas
            ));
        }
        let mut rng = stream_rng(cfg.init_seed, 2);
        let mut store = ParamStore::new();
        let (w, d) = (cfg.embedder_width, cfg.embed_dim);
        for (name, o, i) in [
            ("img.c1", w, 3),
            ("img.c2", 2 * w, w),
            ("img.c3", 2 * w, 2 * w),
        ] {
            store.insert(
                format!("{name}.w"),
                he_init(&mut rng, &[o, i, 3, 3], i * 9),
                true,
            );
            store.insert(format!("{name}.b"), Array::zeros(&[o]), true);
        }
        store.insert("img.head.w", he_init(&mut rng, &[2 * w, d], 2 * w), true);
        store.insert("img.head.b", Array::zeros(&[d]), true);

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
        store.insert("txt.head.w", he_init(&mut rng, &[cfg.text_dim, d], cfg.text_dim), true);
        store.insert("txt.head.b", Array::zeros(&[d]), true);

        Ok(Embedder {
            store,
            vocab,
            trained: false,
            canvas: cfg.canvas,
            embed_dim: d,
            max_len: cfg.max_len,
            text_heads: cfg.text_heads,
        })
    }

    fn image_tower(&self, fwd: &Fwd<f32>, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut h = frames.clone();
        for name in ["img.c1", "img.c2", "img.c3"] {
            h = h
                .conv2d(
                    &fwd.p(&format!("{name}.w"))?,
                    Some(&fwd.p(&format!("{name}.b"))?),
                    (2, 2),
                    (1, 1),
                    1,
                )?
                .silu();
        }
        let pooled = h.mean_tail(2)?;
        Ok(linear_bias(fwd, "img.head", &pooled)?.l2_normalize_rows(1e-12)?)
    }

    fn text_tower(&self, fwd: &Fwd<f32>, ids: &[Vec<usize>]) -> Result<Tensor<f32>> {
        let enc = encode_text(fwd, "txt", ids, self.text_heads)?;
        let [b, s, d] = enc.shape()[..] else {
            return config_err("text tower expects [B, S, D]".to_string());
        };
        // Mask-aware mean pool: pads contribute nothing.
        let mut weights = vec![0.0f32; b * s];
        let mut inv_counts = vec![0.0f32; b];
        for (row, r_ids) in ids.iter().enumerate() {
            let n = r_ids.iter().filter(|&&t| t != PAD).count().max(1);
            inv_counts[row] = 1.0 / n as f32;
            for (col, &t) in r_ids.iter().enumerate() {
                if t != PAD {
                    weights[row * s + col] = 1.0;
                }
            }
        }
        let g = fwd.graph;
        let wt = g.constant(&Array::new(vec![b, s, 1], weights)?);
        let inv = g.constant(&Array::new(vec![b, 1], inv_counts)?);
        let summed = enc
            .mul(&wt)?
            .permute(&[0, 2, 1])?
            .mean_tail(1)?
            .scale(s as f32);
        let pooled = summed.reshape(&[b, d])?.mul(&inv)?;
        Ok(linear_bias(fwd, "txt.head", &pooled)?.l2_normalize_rows(1e-12)?)
    }

    /// Embed RGB frames (each a `3*canvas*canvas` plane vector in [0,1])
    /// to unit-norm rows `[N, D]`.
    pub fn embed_frames(&self, frames: &[Vec<f32>]) -> Result<Array<f32>> {
        if frames.is_empty() {
            return config_err("no frames to embed");
        }
        let px = 3 * self.canvas * self.canvas;
        let mut data = Vec::with_capacity(frames.len() * px);
        for (i, f) in frames.iter().enumerate() {
            if f.len() != px {
                return config_err(format!(
                    "frame {i} has {} values, expected {px}",
                    f.len()
                ));
            }
            data.extend_from_slice(f);
        }
        let arr = Array::new(vec![frames.len(), 3, self.canvas, self.canvas], data)?;
        let g = Graph::new();
        let fwd = Fwd::new(&g, &self.store, false);
        Ok(self.image_tower(&fwd, &g.constant(&arr))?.value())
    }

    /// Embed one prompt to a unit-norm `D`-vector.
    pub fn embed_prompt(&self, prompt: &str) -> Result<Vec<f32>> {
        let ids = vec![self.vocab.tokenize(prompt, self.max_len)];
        let g = Graph::new();
        let fwd = Fwd::new(&g, &self.store, false);
        Ok(self.text_tower(&fwd, &ids)?.value().data().to_vec())
    }

    /// Persist to a standalone container; `load` rebuilds the skeleton
    /// from the embedded config and copies values over it.
    pub fn save(&self, cfg: &Config, path: &std::path::Path) -> Result<()> {
        let mut c = Container::new();
        c.put_text("__config", &cfg.canonical_string())?;
        c.put_text("__vocab", &self.vocab.words().join("\n"))?;
        c.put_u64("__trained", self.trained as u64)?;
        for (name, p) in self.store.iter() {
            c.put_tensor(name, &p.value)?;
        }
        c.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Embedder, Config)> {
        let c = Container::load(path)?;
        let cfg = Config::parse(&c.text("__config")?)?;
        cfg.validate()?;
        let mut emb = Embedder::init(&cfg)?;
        let words: Vec<String> = c.text("__vocab")?.lines().map(str::to_string).collect();
        emb.vocab = Vocab::from_words(words)?;
        let rows = emb.store.get("txt.embed").expect("text table").value.shape()[0];
        if rows != emb.vocab.len() {
            return config_err(format!(
                "vocabulary of {} words does not fit the {rows} embedding rows",
                emb.vocab.len()
            ));
        }
        fill_store(&c, &mut emb.store, "")?;
        emb.trained = c.u64("__trained")? != 0;
        Ok((emb, cfg))
    }
}

/// Mean cosine similarity over all unordered row pairs.
pub fn mean_pairwise_cosine(embs: &Array<f32>) -> Result<f64> {
    let [n, d] = embs.shape()[..] else {
        return config_err(format!("expected [N, D] embeddings, got {:?}", embs.shape()));
    };
    if n < 2 {
        return config_err(format!("need at least 2 embeddings, got {n}"));
    }
    let row = |i: usize| &embs.data()[i * d..(i + 1) * d];
    let mut total = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            total += dot(row(i), row(j));
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Mean cosine over all frame pairs of one video.
pub fn frame_consistency(emb: &Embedder, frames: &[Vec<f32>]) -> Result<f64> {
    if !emb.trained {
        return state_err("embedder is untrained; run embedder training first");
    }
    if frames.len() < 2 {
        return config_err(format!("need at least 2 frames, got {}", frames.len()));
    }
    mean_pairwise_cosine(&emb.embed_frames(frames)?)
}

/// Mean cosine between each frame and the prompt.
pub fn textual_alignment(emb: &Embedder, frames: &[Vec<f32>], prompt: &str) -> Result<f64> {
    if !emb.trained {
        return state_err("embedder is untrained; run embedder training first");
    }
    if frames.is_empty() {
        return config_err("no frames to score");
    }
    let fe = emb.embed_frames(frames)?;
    let pe = emb.embed_prompt(prompt)?;
    let d = pe.len();
    let mean = (0..frames.len())
        .map(|i| dot(&fe.data()[i * d..(i + 1) * d], &pe))
        .sum::<f64>()
        / frames.len() as f64;
    Ok(mean)
}

/// Contrastive training on (frame, caption) pairs. Each batch holds one
/// randomly chosen frame per distinct caption; the loss is symmetric
/// InfoNCE over the cosine logits.
pub fn train_embedder(cfg: &Config, clips: &[Clip]) -> Result<(Embedder, Vec<f64>)> {
    let mut emb = Embedder::init(cfg)?;
    let mut by_caption: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        if c.canvas != emb.canvas {
            return config_err(format!(
                "clip {i} canvas {} does not match configured {}",
                c.canvas, emb.canvas
            ));
        }
        by_caption.entry(&c.caption).or_default().push(i);
    }
    if by_caption.len() < 2 {
        return config_err(format!(
            "contrastive training needs >= 2 distinct captions, corpus has {}",
            by_caption.len()
        ));
    }
    let captions: Vec<&str> = by_caption.keys().copied().collect();
    let k = BATCH.min(captions.len());
    let px = 3 * emb.canvas * emb.canvas;

    let mut opt = Adam::new(cfg.embedder_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = stream_rng(cfg.embedder_seed, 0);
    let inv_temp = (1.0 / cfg.embedder_temp) as f32;
    let mut losses = Vec::with_capacity(cfg.embedder_steps);

    for _ in 0..cfg.embedder_steps {
        let mut picks = captions.clone();
        picks.shuffle(&mut rng);
        picks.truncate(k);
        let mut frame_data = Vec::with_capacity(k * px);
        let mut ids = Vec::with_capacity(k);
        for cap in &picks {
            let owners = &by_caption[cap];
            let clip = &clips[owners[rng.gen_range(0..owners.len())]];
            let frame = rng.gen_range(0..clip.frames.len());
            frame_data.extend_from_slice(&clip.frames[frame]);
            ids.push(emb.vocab.tokenize(cap, emb.max_len));
        }
        let frames = Array::new(vec![k, 3, emb.canvas, emb.canvas], frame_data)?;

        let g = Graph::new();
        let fwd = Fwd::new(&g, &emb.store, true);
        let fe = emb.image_tower(&fwd, &g.constant(&frames))?;
        let te = emb.text_tower(&fwd, &ids)?;
        let logits = fe.matmul(&te.permute(&[1, 0])?)?.scale(inv_temp);
        let diag: Vec<usize> = (0..k).collect();
        let loss = logits
            .cross_entropy_mean(&diag)?
            .add(&logits.permute(&[1, 0])?.cross_entropy_mean(&diag)?)?
            .scale(0.5);
        let value: f64 = loss.item()?.into();
        if !value.is_finite() {
            return Err(crate::error::AppError::Training(format!(
                "non-finite embedder loss at step {}",
                losses.len() + 1
            )));
        }
        losses.push(value);
        g.backward(&loss)?;
        let grads = fwd.grads();
        drop(fwd);
        opt.step(&mut emb.store, &grads);
    }
    emb.trained = true;
    Ok((emb, losses))
}

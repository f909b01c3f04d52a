//! Prompt conditioning: a closed vocabulary over the caption template, a
//! trivial whitespace tokenizer, and a small self-attention encoder that
//! maps token ids to per-token conditioning vectors.
//!
//! The encoder is pre-norm: each block is `x + attn(ln(x))` then
//! `x + ffn(ln(x))`, with a final norm on the way out. Padding positions
//! are excluded from attention by an additive mask; the same mask is
//! handed to downstream consumers so padded slots stay invisible there
//! too.

use crate::attention::{layer_norm, linear_bias, mha};
use crate::error::{config_err, Result};
use crate::params::{he_init, scaled_randn, Fwd, ParamStore};
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Scalar};
use rand_chacha::ChaCha8Rng;

/// Score offset that removes a key from attention without overflowing
/// exp() in f32.
pub const MASK_OFF: f64 = -1e30;

/// Closed word list: ids are dense, `<unk>` always 0, `<pad>` always 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

pub const UNK: usize = 0;
pub const PAD: usize = 1;

impl Vocab {
    /// Vocabulary covering every word the caption template can produce.
    pub fn corpus() -> Vocab {
        let mut words: Vec<String> = vec!["<unk>".into(), "<pad>".into()];
        for w in [
            "a", "red", "green", "blue", "square", "circle", "moving", "right", "left", "up",
            "down",
        ] {
            words.push(w.into());
        }
        Vocab { words }
    }

    /// Rebuilds a vocabulary from a serialized word list.
    pub fn from_words(words: Vec<String>) -> Result<Vocab> {
        if words.len() < 2 || words[UNK] != "<unk>" || words[PAD] != "<pad>" {
            return config_err("word list must start with <unk>, <pad>");
        }
        Ok(Vocab { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.words.iter().position(|w| w == word).unwrap_or(UNK)
    }

    /// Lowercases, splits on whitespace, maps unknowns to `<unk>`, and
    /// truncates or pads to exactly `max_len` ids. Total: never fails.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = text
            .to_lowercase()
            .split_whitespace()
            .take(max_len)
            .map(|w| self.id(w))
            .collect();
        ids.resize(max_len, PAD);
        ids
    }
}

/// Registers encoder weights under `prefix`: token and position tables,
/// `layers` attention blocks, and the final norm.
pub fn init_text_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    vocab: usize,
    max_len: usize,
    d: usize,
    layers: usize,
    ffn: usize,
    trainable: bool,
) {
    store.insert(
        format!("{prefix}.embed"),
        scaled_randn(rng, &[vocab, d], 0.02),
        trainable,
    );
    store.insert(
        format!("{prefix}.pos"),
        scaled_randn(rng, &[max_len, d], 0.02),
        trainable,
    );
    for i in 0..layers {
        let block = format!("{prefix}.l{i}");
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{block}.{ln}.g"), Array::from_fn(&[d], |_| T::one()), trainable);
            store.insert(format!("{block}.{ln}.b"), Array::zeros(&[d]), trainable);
        }
        for p in ["q", "k", "v", "o"] {
            store.insert(
                format!("{block}.attn.{p}.w"),
                he_init(rng, &[d, d], d),
                trainable,
            );
        }
        store.insert(format!("{block}.ffn.w1.w"), he_init(rng, &[d, ffn], d), trainable);
        store.insert(format!("{block}.ffn.w1.b"), Array::zeros(&[ffn]), trainable);
        store.insert(format!("{block}.ffn.w2.w"), he_init(rng, &[ffn, d], ffn), trainable);
        store.insert(format!("{block}.ffn.w2.b"), Array::zeros(&[d]), trainable);
    }
    store.insert(format!("{prefix}.lnf.g"), Array::from_fn(&[d], |_| T::one()), trainable);
    store.insert(format!("{prefix}.lnf.b"), Array::zeros(&[d]), trainable);
}

/// Additive attention mask for a batch of id rows: 0 for real tokens,
/// a large negative number for padding.
pub fn pad_mask<T: Scalar>(ids: &[Vec<usize>]) -> Result<Array<T>> {
    let b = ids.len();
    let s = ids.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(b * s);
    for row in ids {
        if row.len() != s {
            return config_err("ragged id batch");
        }
        for &id in row {
            data.push(if id == PAD { T::from_f64(MASK_OFF) } else { T::zero() });
        }
    }
    Ok(Array::new(vec![b, s], data)?)
}

/// Encodes a batch of id rows to `[B, S, D]` token vectors. All rows must
/// share one length `S` (at most the position table's length). Ids must
/// lie inside the embedding table.
pub fn encode_text<T: Scalar>(
    fwd: &Fwd<T>,
    prefix: &str,
    ids: &[Vec<usize>],
    heads: usize,
) -> Result<Tensor<T>> {
    let b = ids.len();
    let s = ids.first().map_or(0, |r| r.len());
    if b == 0 || s == 0 {
        return config_err("empty id batch");
    }
    let embed = fwd.p(&format!("{prefix}.embed"))?;
    let pos = fwd.p(&format!("{prefix}.pos"))?;
    let vocab = embed.shape()[0];
    let d = embed.shape()[1];
    if s > pos.shape()[0] {
        return config_err(format!(
            "sequence length {s} exceeds position table {}",
            pos.shape()[0]
        ));
    }
    let mut flat = Vec::with_capacity(b * s);
    for row in ids {
        if row.len() != s {
            return config_err("ragged id batch");
        }
        for &id in row {
            if id >= vocab {
                return config_err(format!("token id {id} outside vocabulary of {vocab}"));
            }
            flat.push(id);
        }
    }
    let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let tok = embed.gather_rows(&flat)?;
    let pe = pos.gather_rows(&pos_ids)?;
    let mut x = tok.add(&pe)?.reshape(&[b, s, d])?;

    let mask = pad_mask::<T>(ids)?;
    let mut layer = 0;
    while fwd.has(&format!("{prefix}.l{layer}.ln1.g")) {
        let block = format!("{prefix}.l{layer}");
        let normed = layer_norm(fwd, &format!("{block}.ln1"), &x)?;
        let attended = mha(
            fwd,
            &format!("{block}.attn"),
            &normed,
            &normed,
            heads,
            0.0,
            Some(&mask),
        )?;
        let h = x.add(&attended)?;
        let normed2 = layer_norm(fwd, &format!("{block}.ln2"), &h)?.reshape(&[b * s, d])?;
        let mid = linear_bias(fwd, &format!("{block}.ffn.w1"), &normed2)?.silu();
        let out = linear_bias(fwd, &format!("{block}.ffn.w2"), &mid)?.reshape(&[b, s, d])?;
        x = h.add(&out)?;
        layer += 1;
    }
    layer_norm(fwd, &format!("{prefix}.lnf"), &x)
}

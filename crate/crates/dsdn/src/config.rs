//! Flat `key = value` run configuration.
//!
//! One file drives every subcommand: data generation, codec and embedder
//! pretraining, joint training, and sampling. Lines are `key = value`,
//! `#` starts a comment, unknown and duplicated keys are hard errors so a
//! typo cannot silently fall back to a default. The canonical serialized
//! form (sorted keys) is hashed into run manifests so any two runs with
//! the same hash saw byte-identical settings.

use crate::error::{config_err, AppError, Result};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecMode {
    Learned,
    Identity,
}

impl CodecMode {
    fn as_str(&self) -> &'static str {
        match self {
            CodecMode::Learned => "learned",
            CodecMode::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    /// Diffusion steps; key is literally `T`.
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub frames: usize,
    pub canvas: usize,
    pub latent_channels: usize,
    pub latent_size: usize,

    pub codec_mode: CodecMode,
    pub codec_width: usize,
    pub codec_epochs: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,

    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub holdout_size: usize,
    pub holdout_seed: u64,

    pub content_width: usize,
    pub motion_width: usize,
    pub heads: usize,
    pub gn_groups: usize,
    pub temb_dim: usize,
    pub temb_hidden: usize,
    pub rank: usize,
    pub lambda: f64,
    pub r_c: usize,

    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ffn: usize,
    pub max_len: usize,

    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub w_con: f64,
    pub w_mot: f64,
    pub w_comb: f64,
    pub freeze_motion_stream: bool,
    pub train_seed: u64,
    pub init_seed: u64,

    pub embed_dim: usize,
    pub embedder_width: usize,
    pub embedder_steps: usize,
    pub embedder_lr: f64,
    pub embedder_temp: f64,
    pub embedder_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            t_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            frames: 8,
            canvas: 64,
            latent_channels: 8,
            latent_size: 16,
            codec_mode: CodecMode::Learned,
            codec_width: 16,
            codec_epochs: 12,
            codec_batch: 16,
            codec_lr: 1e-3,
            corpus_size: 100,
            corpus_seed: 1,
            holdout_size: 50,
            holdout_seed: 2,
            content_width: 24,
            motion_width: 16,
            heads: 4,
            gn_groups: 4,
            temb_dim: 64,
            temb_hidden: 96,
            rank: 4,
            lambda: 1.0,
            r_c: 4,
            text_dim: 64,
            text_layers: 2,
            text_heads: 4,
            text_ffn: 128,
            max_len: 8,
            train_steps: 500,
            batch_size: 2,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            w_con: 1.0,
            w_mot: 1.0,
            w_comb: 1.0,
            freeze_motion_stream: false,
            train_seed: 7,
            init_seed: 3,
            embed_dim: 32,
            embedder_width: 16,
            embedder_steps: 400,
            embedder_lr: 1e-3,
            embedder_temp: 0.1,
            embedder_seed: 11,
        }
    }
}

macro_rules! parse_as {
    ($ty:ty, $val:expr, $key:expr, $line:expr) => {
        $val.parse::<$ty>().map_err(|_| {
            AppError::Config(format!(
                "line {}: key `{}`: cannot parse `{}` as {}",
                $line,
                $key,
                $val,
                stringify!($ty)
            ))
        })?
    };
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Parse overrides on top of the defaults. Empty input is the default
    /// configuration.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return config_err(format!("line {lineno}: expected `key = value`, got `{line}`"));
            };
            let key = line[..eq].trim();
            let val = line[eq + 1..].trim();
            if key.is_empty() || val.is_empty() {
                return config_err(format!("line {lineno}: expected `key = value`, got `{line}`"));
            }
            if !seen.insert(key.to_string()) {
                return config_err(format!("line {lineno}: duplicate key `{key}`"));
            }
            cfg.set(key, val, lineno)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, val: &str, line: usize) -> Result<()> {
        match key {
            "T" => self.t_steps = parse_as!(usize, val, key, line),
            "beta_start" => self.beta_start = parse_as!(f64, val, key, line),
            "beta_end" => self.beta_end = parse_as!(f64, val, key, line),
            "frames" => self.frames = parse_as!(usize, val, key, line),
            "canvas" => self.canvas = parse_as!(usize, val, key, line),
            "latent_channels" => self.latent_channels = parse_as!(usize, val, key, line),
            "latent_size" => self.latent_size = parse_as!(usize, val, key, line),
            "codec_mode" => {
                self.codec_mode = match val {
                    "learned" => CodecMode::Learned,
                    "identity" => CodecMode::Identity,
                    _ => {
                        return config_err(format!(
                            "line {line}: key `codec_mode`: expected learned|identity, got `{val}`"
                        ))
                    }
                }
            }
            "codec_width" => self.codec_width = parse_as!(usize, val, key, line),
            "codec_epochs" => self.codec_epochs = parse_as!(usize, val, key, line),
            "codec_batch" => self.codec_batch = parse_as!(usize, val, key, line),
            "codec_lr" => self.codec_lr = parse_as!(f64, val, key, line),
            "corpus_size" => self.corpus_size = parse_as!(usize, val, key, line),
            "corpus_seed" => self.corpus_seed = parse_as!(u64, val, key, line),
            "holdout_size" => self.holdout_size = parse_as!(usize, val, key, line),
            "holdout_seed" => self.holdout_seed = parse_as!(u64, val, key, line),
            "content_width" => self.content_width = parse_as!(usize, val, key, line),
            "motion_width" => self.motion_width = parse_as!(usize, val, key, line),
            "heads" => self.heads = parse_as!(usize, val, key, line),
            "gn_groups" => self.gn_groups = parse_as!(usize, val, key, line),
            "temb_dim" => self.temb_dim = parse_as!(usize, val, key, line),
            "temb_hidden" => self.temb_hidden = parse_as!(usize, val, key, line),
            "rank" => self.rank = parse_as!(usize, val, key, line),
            "lambda" => self.lambda = parse_as!(f64, val, key, line),
            "r_c" => self.r_c = parse_as!(usize, val, key, line),
            "text_dim" => self.text_dim = parse_as!(usize, val, key, line),
            "text_layers" => self.text_layers = parse_as!(usize, val, key, line),
            "text_heads" => self.text_heads = parse_as!(usize, val, key, line),
            "text_ffn" => self.text_ffn = parse_as!(usize, val, key, line),
            "max_len" => self.max_len = parse_as!(usize, val, key, line),
            "train_steps" => self.train_steps = parse_as!(usize, val, key, line),
            "batch_size" => self.batch_size = parse_as!(usize, val, key, line),
            "lr" => self.lr = parse_as!(f64, val, key, line),
            "adam_beta1" => self.adam_beta1 = parse_as!(f64, val, key, line),
            "adam_beta2" => self.adam_beta2 = parse_as!(f64, val, key, line),
            "adam_eps" => self.adam_eps = parse_as!(f64, val, key, line),
            "w_con" => self.w_con = parse_as!(f64, val, key, line),
            "w_mot" => self.w_mot = parse_as!(f64, val, key, line),
            "w_comb" => self.w_comb = parse_as!(f64, val, key, line),
            "freeze_motion_stream" => self.freeze_motion_stream = parse_as!(bool, val, key, line),
            "train_seed" => self.train_seed = parse_as!(u64, val, key, line),
            "init_seed" => self.init_seed = parse_as!(u64, val, key, line),
            "embed_dim" => self.embed_dim = parse_as!(usize, val, key, line),
            "embedder_width" => self.embedder_width = parse_as!(usize, val, key, line),
            "embedder_steps" => self.embedder_steps = parse_as!(usize, val, key, line),
            "embedder_lr" => self.embedder_lr = parse_as!(f64, val, key, line),
            "embedder_temp" => self.embedder_temp = parse_as!(f64, val, key, line),
            "embedder_seed" => self.embedder_seed = parse_as!(u64, val, key, line),
            _ => return config_err(format!("line {line}: unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| -> Result<()> { config_err(msg) };
        if self.t_steps < 1 {
            return bad(format!("T must be >= 1, got {}", self.t_steps));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(format!(
                "beta_start/beta_end must satisfy 0 < beta_start <= beta_end < 1, got {}/{}",
                self.beta_start, self.beta_end
            ));
        }
        if self.frames < 2 {
            return bad(format!("frames must be >= 2, got {}", self.frames));
        }
        if self.latent_size < 4 || self.latent_size % 2 != 0 {
            return bad(format!(
                "latent_size must be even and >= 4, got {}",
                self.latent_size
            ));
        }
        match self.codec_mode {
            CodecMode::Learned => {
                if self.canvas != 4 * self.latent_size {
                    return bad(format!(
                        "canvas must equal 4*latent_size in learned codec_mode, got {} vs {}",
                        self.canvas,
                        4 * self.latent_size
                    ));
                }
                if self.latent_channels % self.r_c != 0 {
                    return bad(format!(
                        "latent_channels {} must be divisible by r_c {}",
                        self.latent_channels, self.r_c
                    ));
                }
            }
            CodecMode::Identity => {
                let px = 3 * self.canvas * self.canvas;
                let cell = self.latent_size * self.latent_size;
                if px % cell != 0 {
                    return bad(format!(
                        "identity codec_mode needs 3*canvas^2 divisible by latent_size^2, got {px}/{cell}"
                    ));
                }
                if (px / cell) % self.r_c != 0 {
                    return bad(format!(
                        "identity latent channels {} must be divisible by r_c {}",
                        px / cell,
                        self.r_c
                    ));
                }
            }
        }
        for (name, w) in [
            ("content_width", self.content_width),
            ("motion_width", self.motion_width),
        ] {
            if w == 0 || w % self.heads != 0 || (2 * w) % self.heads != 0 {
                return bad(format!("{name} {w} must be a positive multiple of heads {}", self.heads));
            }
            if w % self.gn_groups != 0 {
                return bad(format!(
                    "{name} {w} must be divisible by gn_groups {}",
                    self.gn_groups
                ));
            }
        }
        let min_proj = self
            .content_width
            .min(self.motion_width)
            .min(self.text_dim);
        if self.rank == 0 || self.rank >= min_proj {
            return bad(format!(
                "rank {} must be in [1, {}) for the smallest projection",
                self.rank, min_proj
            ));
        }
        if self.lambda < 0.0 {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.r_c == 0 {
            return bad("r_c must be >= 1".to_string());
        }
        if self.text_dim == 0 || self.text_dim % self.text_heads != 0 {
            return bad(format!(
                "text_dim {} must be a positive multiple of text_heads {}",
                self.text_dim, self.text_heads
            ));
        }
        if self.max_len < 1 {
            return bad("max_len must be >= 1".to_string());
        }
        for (name, v) in [
            ("canvas", self.canvas),
            ("temb_dim", self.temb_dim),
            ("temb_hidden", self.temb_hidden),
            ("text_layers", self.text_layers),
            ("text_ffn", self.text_ffn),
            ("train_steps", self.train_steps),
            ("batch_size", self.batch_size),
            ("corpus_size", self.corpus_size),
            ("holdout_size", self.holdout_size),
            ("codec_width", self.codec_width),
            ("codec_batch", self.codec_batch),
            ("embed_dim", self.embed_dim),
            ("embedder_width", self.embedder_width),
            ("embedder_steps", self.embedder_steps),
            ("heads", self.heads),
            ("gn_groups", self.gn_groups),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.temb_dim % 2 != 0 {
            return bad(format!("temb_dim must be even, got {}", self.temb_dim));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("codec_lr", self.codec_lr),
            ("embedder_lr", self.embedder_lr),
            ("adam_eps", self.adam_eps),
            ("embedder_temp", self.embedder_temp),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        for (name, v) in [("w_con", self.w_con), ("w_mot", self.w_mot), ("w_comb", self.w_comb)] {
            if v < 0.0 {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Latent channel count the rest of the pipeline sees. Identity mode
    /// packs every pixel into channels at the configured latent size.
    pub fn model_channels(&self) -> usize {
        match self.codec_mode {
            CodecMode::Learned => self.latent_channels,
            CodecMode::Identity => {
                3 * self.canvas * self.canvas / (self.latent_size * self.latent_size)
            }
        }
    }

    /// Sorted `key = value` lines for hashing and manifests.
    pub fn canonical_string(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("T", self.t_steps.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("frames", self.frames.to_string()),
            ("canvas", self.canvas.to_string()),
            ("latent_channels", self.latent_channels.to_string()),
            ("latent_size", self.latent_size.to_string()),
            ("codec_mode", self.codec_mode.as_str().to_string()),
            ("codec_width", self.codec_width.to_string()),
            ("codec_epochs", self.codec_epochs.to_string()),
            ("codec_batch", self.codec_batch.to_string()),
            ("codec_lr", self.codec_lr.to_string()),
            ("corpus_size", self.corpus_size.to_string()),
            ("corpus_seed", self.corpus_seed.to_string()),
            ("holdout_size", self.holdout_size.to_string()),
            ("holdout_seed", self.holdout_seed.to_string()),
            ("content_width", self.content_width.to_string()),
            ("motion_width", self.motion_width.to_string()),
            ("heads", self.heads.to_string()),
            ("gn_groups", self.gn_groups.to_string()),
            ("temb_dim", self.temb_dim.to_string()),
            ("temb_hidden", self.temb_hidden.to_string()),
            ("rank", self.rank.to_string()),
            ("lambda", self.lambda.to_string()),
            ("r_c", self.r_c.to_string()),
            ("text_dim", self.text_dim.to_string()),
            ("text_layers", self.text_layers.to_string()),
            ("text_heads", self.text_heads.to_string()),
            ("text_ffn", self.text_ffn.to_string()),
            ("max_len", self.max_len.to_string()),
            ("train_steps", self.train_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("w_con", self.w_con.to_string()),
            ("w_mot", self.w_mot.to_string()),
            ("w_comb", self.w_comb.to_string()),
            ("freeze_motion_stream", self.freeze_motion_stream.to_string()),
            ("train_seed", self.train_seed.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("embedder_width", self.embedder_width.to_string()),
            ("embedder_steps", self.embedder_steps.to_string()),
            ("embedder_lr", self.embedder_lr.to_string()),
            ("embedder_temp", self.embedder_temp.to_string()),
            ("embedder_seed", self.embedder_seed.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_string().as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_all_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg.canonical_string(), Config::default().canonical_string());
    }

    #[test]
    fn zero_t_is_rejected_by_name() {
        let err = Config::parse("T = 0").unwrap_err().to_string();
        assert!(err.contains('T'), "{err}");
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = Config::parse("frames = 8\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = Config::parse("lr = 0.1\nlr = 0.2\n").unwrap_err().to_string();
        assert!(err.contains("duplicate") && err.contains("lr"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = Config::parse("# full comment\n\nframes = 4  # trailing\n").unwrap();
        assert_eq!(cfg.frames, 4);
    }

    #[test]
    fn bad_value_names_line_and_key() {
        let err = Config::parse("frames = many").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("frames"), "{err}");
    }

    #[test]
    fn canonical_form_reparses_to_itself() {
        let cfg = Config::default();
        let round = Config::parse(&cfg.canonical_string()).unwrap();
        assert_eq!(cfg.canonical_string(), round.canonical_string());
        assert_eq!(cfg.hash(), round.hash());
    }

    #[test]
    fn identity_mode_channel_count() {
        let cfg = Config::parse("codec_mode = identity").unwrap();
        assert_eq!(cfg.model_channels(), 48);
    }

    #[test]
    fn mismatched_canvas_is_rejected() {
        let err = Config::parse("canvas = 32").unwrap_err().to_string();
        assert!(err.contains("canvas"), "{err}");
    }

    // Recorded once from the shipped defaults; any change to a default or
    // to the canonical serialization is a deliberate, visible event.
    #[test]
    fn default_hash_is_stable() {
        assert_eq!(
            Config::default().hash(),
            "5fb6ba9d60effe76bccae14b12aa626347034356856798f03b5b5aaa2da80e36"
        );
    }
}

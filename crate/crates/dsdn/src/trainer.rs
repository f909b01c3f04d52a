//! Joint training of the two denoising streams.
//!
//! Each step draws from its own RNG substream keyed by the step index, so
//! a resumed run replays the exact draw sequence of an uninterrupted one.
//! Within a step the draw order is fixed: batch indices, timesteps, then
//! content noise, then motion noise.

use crate::checkpoint::{fill_store, Container};
use crate::codec::Codec;
use crate::config::Config;
use crate::error::{config_err, format_err, state_err, AppError, Result};
use crate::model::{mse, DsdnModel, PredictOpts};
use crate::motion::{combine, decompose};
use crate::optim::Adam;
use crate::params::Fwd;
use crate::schedule::NoiseSchedule;
use crate::stream_rng;
use crate::text::Vocab;
use dsdn_core::{Array, Graph};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Offset of the per-step RNG substreams under `train_seed`.
const STEP_STREAM_BASE: u64 = 1000;

/// Everything a training run mutates, bundled for checkpointing.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DsdnModel<f32>,
    pub codec: Codec,
    pub opt: Adam<f32>,
    /// Completed steps; the next step draws from substream
    /// `STEP_STREAM_BASE + step`.
    pub step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: u64,
    pub loss_con: f64,
    pub loss_mot: f64,
    pub loss_comb: f64,
    pub total: f64,
}

impl StepStats {
    /// Progress-log line: `step loss_con loss_mot total`.
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6}",
            self.step, self.loss_con, self.loss_mot, self.total
        )
    }
}

/// Fresh trainable state over a trained codec.
pub fn init_state(cfg: &Config, codec: Codec) -> Result<TrainState> {
    if !codec.trained {
        return state_err("codec is untrained; run codec training first");
    }
    let model = DsdnModel::init(cfg)?;
    let opt = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Ok(TrainState {
        model,
        codec,
        opt,
        step: 0,
    })
}

fn stack_batch(latents: &[Array<f32>], idx: &[usize]) -> Result<Array<f32>> {
    let first = &latents[idx[0]];
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(idx.len() * first.numel());
    for &i in idx {
        if latents[i].shape() != first.shape() {
            return config_err(format!(
                "latent {} has shape {:?}, batch started with {:?}",
                i,
                latents[i].shape(),
                first.shape()
            ));
        }
        data.extend_from_slice(latents[i].data());
    }
    Ok(Array::new(shape, data)?)
}

/// One optimization step over the encoded corpus. `latents` holds one
/// `[L, C, h, w]` array per clip, `ids` the matching tokenized captions.
pub fn train_step(
    state: &mut TrainState,
    latents: &[Array<f32>],
    ids: &[Vec<usize>],
    sched: &NoiseSchedule,
) -> Result<StepStats> {
    if latents.is_empty() || latents.len() != ids.len() {
        return config_err(format!(
            "corpus of {} latents with {} caption id rows",
            latents.len(),
            ids.len()
        ));
    }
    let cfg = state.model.cfg.clone();
    let step = state.step;
    let mut rng = stream_rng(cfg.train_seed, STEP_STREAM_BASE + step);

    let b = cfg.batch_size;
    let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..latents.len())).collect();
    let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=cfg.t_steps)).collect();
    let z0 = stack_batch(latents, &idx)?;
    let eps_con = Array::<f32>::randn(&mut rng, z0.shape());
    let eps_mot = Array::<f32>::randn(&mut rng, z0.shape());
    let batch_ids: Vec<Vec<usize>> = idx.iter().map(|&i| ids[i].clone()).collect();

    let g = Graph::new();
    let fwd = Fwd::new(&g, &state.model.store, true);
    let z0c = g.constant(&z0);
    let eps_con_c = g.constant(&eps_con);
    let eps_mot_c = g.constant(&eps_mot);

    // Motion targets come from the (trainable) decomposition of the clean
    // latents, so those convs learn from both denoising and
    // reconstruction pressure.
    let m0 = decompose(&fwd, "mops", &z0c)?;
    let zt_con = sched.q_sample_graph(&z0c, &ts, &eps_con_c)?;
    let zt_mot = sched.q_sample_graph(&m0, &ts, &eps_mot_c)?;

    let (pred_con, pred_mot) = state.model.predict(
        &fwd,
        &zt_con,
        &zt_mot,
        &ts,
        &batch_ids,
        &PredictOpts::default(),
    )?;
    let pred_mot = pred_mot.expect("motion stream is on during training");

    let loss_con = mse(&pred_con, &eps_con_c)?;
    let loss_mot = mse(&pred_mot, &eps_mot_c)?;
    let recon = combine(&fwd, "mops", &z0c, &m0)?;
    let loss_comb = mse(&recon, &z0c)?;
    let total = loss_con
        .scale(cfg.w_con as f32)
        .add(&loss_mot.scale(cfg.w_mot as f32))?
        .add(&loss_comb.scale(cfg.w_comb as f32))?;

    let stats = StepStats {
        step: step + 1,
        loss_con: loss_con.item()?.into(),
        loss_mot: loss_mot.item()?.into(),
        loss_comb: loss_comb.item()?.into(),
        total: total.item()?.into(),
    };
    if !stats.total.is_finite() {
        return Err(AppError::Training(format!(
            "non-finite loss at step {}: con={} mot={} comb={} (t={:?}, clips={:?})",
            stats.step, stats.loss_con, stats.loss_mot, stats.loss_comb, ts, idx
        )));
    }

    g.backward(&total)?;
    let mut grads = fwd.grads();
    if cfg.freeze_motion_stream {
        grads.retain(|name, _| !name.starts_with("mot."));
    }
    drop(fwd);
    state.opt.step(&mut state.model.store, &grads);
    state.step += 1;
    Ok(stats)
}

/// Runs `steps` more steps, invoking `log` after each.
pub fn train(
    state: &mut TrainState,
    latents: &[Array<f32>],
    ids: &[Vec<usize>],
    sched: &NoiseSchedule,
    steps: usize,
    mut log: impl FnMut(&StepStats),
) -> Result<Vec<StepStats>> {
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let stats = train_step(state, latents, ids, sched)?;
        log(&stats);
        out.push(stats);
    }
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut c = Container::new();
    c.put_text("__config", &state.model.cfg.canonical_string())?;
    c.put_text("__vocab", &state.model.vocab.words().join("\n"))?;
    c.put_u64("__step", state.step)?;
    let (opt_steps, m, v) = state.opt.export();
    c.put_u64("__opt_steps", opt_steps)?;
    for (name, p) in state.model.store.iter() {
        c.put_tensor(name, &p.value)?;
    }
    for (name, p) in state.codec.store.iter() {
        c.put_tensor(&format!("codec.{name}"), &p.value)?;
    }
    c.put_tensor("codec.__scale", &Array::new(vec![1], vec![state.codec.latent_scale])?)?;
    c.put_u64("codec.__trained", state.codec.trained as u64)?;
    for (name, buf) in &m {
        c.put_tensor(&format!("opt.m.{name}"), &Array::new(vec![buf.len()], buf.clone())?)?;
    }
    for (name, buf) in &v {
        c.put_tensor(&format!("opt.v.{name}"), &Array::new(vec![buf.len()], buf.clone())?)?;
    }
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let c = Container::load(path)?;
    let cfg = Config::parse(&c.text("__config")?)?;
    cfg.validate()?;

    let mut model = DsdnModel::<f32>::init(&cfg)?;
    let words: Vec<String> = c.text("__vocab")?.lines().map(str::to_string).collect();
    model.vocab = Vocab::from_words(words)?;
    let embed_rows = model.store.get("txt.embed").expect("text table").value.shape()[0];
    if embed_rows != model.vocab.len() {
        return format_err(format!(
            "vocabulary of {} words does not fit the {} embedding rows",
            model.vocab.len(),
            embed_rows
        ));
    }
    fill_store(&c, &mut model.store, "")?;

    let mut codec = Codec::init(&cfg);
    fill_store(&c, &mut codec.store, "codec.")?;
    let scale: Array<f32> = c.tensor("codec.__scale")?;
    codec.latent_scale = scale.data()[0];
    codec.trained = c.u64("codec.__trained")? != 0;

    let mut opt = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for full in c.names() {
        let (map, name) = if let Some(n) = full.strip_prefix("opt.m.") {
            (&mut m, n)
        } else if let Some(n) = full.strip_prefix("opt.v.") {
            (&mut v, n)
        } else {
            continue;
        };
        let Some(param) = model.store.get(name) else {
            return format_err(format!("entry `{full}` names an unknown parameter"));
        };
        let buf: Array<f32> = c.tensor(full)?;
        if buf.numel() != param.value.numel() {
            return format_err(format!(
                "entry `{full}` holds {} moments for a parameter of {}",
                buf.numel(),
                param.value.numel()
            ));
        }
        map.insert(name.to_string(), buf.data().to_vec());
    }
    opt.restore(c.u64("__opt_steps")?, m, v);

    Ok(TrainState {
        model,
        codec,
        opt,
        step: c.u64("__step")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> Config {
        let mut cfg = crate::model::tests::tiny_cfg();
        cfg.batch_size = 2;
        cfg
    }

    fn tiny_corpus(cfg: &Config, n: usize) -> (Vec<Array<f32>>, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let vocab = Vocab::corpus();
        let captions = [
            "a red square moving right",
            "a blue circle moving up",
            "a green square moving left",
            "a red circle moving down",
        ];
        let latents = (0..n)
            .map(|_| Array::randn(&mut rng, &[cfg.frames, 4, 4, 4]))
            .collect();
        let ids = (0..n)
            .map(|i| vocab.tokenize(captions[i % captions.len()], cfg.max_len))
            .collect();
        (latents, ids)
    }

    fn fresh(cfg: &Config) -> TrainState {
        // These tests feed latents directly, so the codec's weights are
        // irrelevant; only the trained flag gates init.
        let mut codec = Codec::init(cfg);
        codec.trained = true;
        init_state(cfg, codec).unwrap()
    }

    #[test]
    fn untrained_codec_is_refused() {
        let mut cfg = tiny_cfg();
        cfg.codec_mode = crate::config::CodecMode::Learned;
        let codec = Codec::init(&cfg);
        assert!(!codec.trained);
        assert!(matches!(init_state(&cfg, codec), Err(AppError::State(_))));
    }

    #[test]
    fn same_seed_same_loss_sequence() {
        let cfg = tiny_cfg();
        let (latents, ids) = tiny_corpus(&cfg, 4);
        let sched = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let run = || {
            let mut state = fresh(&cfg);
            train(&mut state, &latents, &ids, &sched, 3, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
            assert!(x.total.is_finite());
        }
    }

    #[test]
    fn frozen_parameters_never_move() {
        let cfg = tiny_cfg();
        let (latents, ids) = tiny_corpus(&cfg, 4);
        let sched = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let mut state = fresh(&cfg);
        let before: Vec<(String, Vec<u32>)> = state
            .model
            .store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| (n.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        assert!(!before.is_empty());
        train(&mut state, &latents, &ids, &sched, 3, |_| {}).unwrap();
        for (name, bits) in &before {
            let now = &state.model.store.get(name).unwrap().value;
            for (a, b) in bits.iter().zip(now.data()) {
                assert_eq!(*a, b.to_bits(), "{name} moved");
            }
        }
        // And the trainable side did move.
        let adapter = state.model.store.get("con.d1.self.q.a").unwrap();
        assert!(adapter.trainable);
        let moved = state
            .model
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .any(|(_, p)| p.value.data().iter().any(|v| *v != 0.0));
        assert!(moved);
    }

    #[test]
    fn motion_freeze_flag_pins_the_motion_net() {
        let mut cfg = tiny_cfg();
        cfg.freeze_motion_stream = true;
        let (latents, ids) = tiny_corpus(&cfg, 4);
        let sched = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let mut state = fresh(&cfg);
        let before: Vec<(String, Vec<u32>)> = state
            .model
            .store
            .iter()
            .filter(|(n, _)| n.starts_with("mot."))
            .map(|(n, p)| (n.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let txt_before: Vec<u32> = state
            .model
            .store
            .get("txt.embed")
            .unwrap()
            .value
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        train(&mut state, &latents, &ids, &sched, 2, |_| {}).unwrap();
        for (name, bits) in &before {
            let now = &state.model.store.get(name).unwrap().value;
            for (a, b) in bits.iter().zip(now.data()) {
                assert_eq!(*a, b.to_bits(), "{name} moved under freeze");
            }
        }
        let txt_now = &state.model.store.get("txt.embed").unwrap().value;
        assert!(txt_now
            .data()
            .iter()
            .zip(&txt_before)
            .any(|(v, b)| v.to_bits() != *b));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny_cfg();
        let (latents, ids) = tiny_corpus(&cfg, 4);
        let sched = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.dsdn");

        let mut straight = fresh(&cfg);
        let all = train(&mut straight, &latents, &ids, &sched, 6, |_| {}).unwrap();

        let mut first = fresh(&cfg);
        train(&mut first, &latents, &ids, &sched, 3, |_| {}).unwrap();
        save_checkpoint(&first, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap();
        assert_eq!(resumed.step, 3);
        let tail = train(&mut resumed, &latents, &ids, &sched, 3, |_| {}).unwrap();
        for (a, b) in all[3..].iter().zip(&tail) {
            assert_eq!(a.step, b.step);
            assert!((a.total - b.total).abs() <= 1e-6, "{} vs {}", a.total, b.total);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let cfg = tiny_cfg();
        let (latents, ids) = tiny_corpus(&cfg, 4);
        let sched = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let mut state = fresh(&cfg);
        train(&mut state, &latents, &ids, &sched, 2, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.dsdn");
        let p2 = dir.path().join("b.dsdn");
        save_checkpoint(&state, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let cfg = tiny_cfg();
        let (latents, ids) = tiny_corpus(&cfg, 4);
        let sched = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end).unwrap();
        let mut state = fresh(&cfg);
        state.model.store.get_mut("mot.stem.w").unwrap().value =
            Array::full(&[4, 4, 3, 3, 3], f32::NAN);
        let err = train_step(&mut state, &latents, &ids, &sched).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, AppError::Training(_)));
        assert!(msg.contains("step 1"), "{msg}");
    }

    #[test]
    fn log_line_shape() {
        let s = StepStats {
            step: 12,
            loss_con: 0.5,
            loss_mot: 0.25,
            loss_comb: 0.125,
            total: 0.875,
        };
        assert_eq!(s.log_line(), "12 0.500000 0.250000 0.875000");
    }
}

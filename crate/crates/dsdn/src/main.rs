//! Command-line surface. Thin glue over the library: parse arguments,
//! load the run config, dispatch, and map failures to exit codes
//! (0 success, 1 usage error, 2 runtime error).
//!
//! Every subcommand that produces files also writes a JSON manifest
//! beside them (config echo + hash, seeds, crate version) so a run can
//! be reproduced from its output directory alone.

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use dsdn::codec::{train_codec, Codec};
use dsdn::data::{corpus_hash, dump_corpus, make_corpus};
use dsdn::metrics::{frame_consistency, textual_alignment, train_embedder, Embedder};
use dsdn::sampler::{self, SampleRequest};
use dsdn::schedule::NoiseSchedule;
use dsdn::trainer::{init_state, load_checkpoint, save_checkpoint, train};
use dsdn::{ppm, AppError, Config};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dsdn",
    version,
    about = "Dual-stream text-to-video diffusion at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic corpus tooling
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Pretrain the frame codec on the corpus, then freeze it
    TrainCodec {
        /// Run config file (key = value lines); defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the trained codec container
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the evaluation embedder on the corpus
    TrainEmbedder {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the trained embedder container
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint denoising training over the encoded corpus
    Train {
        #[arg(long, conflicts_with = "resume")]
        config: Option<PathBuf>,
        /// Trained codec container (from train-codec)
        #[arg(long, required_unless_present = "resume", conflicts_with = "resume")]
        codec: Option<PathBuf>,
        /// Continue a previous run from its checkpoint instead
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint path; rewritten every 50 steps and at completion
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a video from a trained checkpoint
    Sample {
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Generate with one pipeline component bypassed
    Ablate {
        #[command(flatten)]
        gen: GenArgs,
        /// Component to bypass
        #[arg(long, value_parser = parse_component)]
        disable: sampler::Ablate,
    },
    /// Score generated videos with a trained embedder
    Eval {
        /// Trained embedder container (from train-embedder)
        #[arg(long)]
        embedder: PathBuf,
        /// Video directories (frame_*.ppm plus manifest.json or caption.txt)
        #[arg(required = true)]
        videos: Vec<PathBuf>,
    },
    /// Finite-difference gradient audit of every kernel and the assembled model
    Gradcheck,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Render the captioned corpus to disk, one directory per clip
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Render the held-out split (holdout_size/holdout_seed) instead
        #[arg(long)]
        holdout: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags shared by `sample` and `ablate`.
#[derive(clap::Args)]
struct GenArgs {
    /// Trained checkpoint (from train)
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denoising steps; the checkpoint's T when omitted
    #[arg(long)]
    steps: Option<usize>,
    /// Frames to generate; the checkpoint's clip length when omitted
    #[arg(long)]
    frames: Option<usize>,
    /// Output directory for frame_NNN.ppm and manifest.json
    #[arg(long)]
    out: PathBuf,
}

fn parse_component(s: &str) -> std::result::Result<sampler::Ablate, String> {
    s.parse::<sampler::Ablate>().map_err(|e| match e {
        AppError::Config(m) => m,
        other => other.to_string(),
    })
}

fn main() -> ExitCode {
    let defaults: String = Config::default()
        .canonical_string()
        .lines()
        .map(|l| format!("  {l}\n"))
        .collect();
    let cmd = Cli::command().after_help(format!(
        "Config keys and their defaults (flat `key = value` lines, `#` comments):\n{defaults}"
    ));
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> dsdn::Result<ExitCode> {
    match cmd {
        Cmd::Data {
            cmd: DataCmd::Gen { config, holdout, out },
        } => data_gen(&config, holdout, &out)?,
        Cmd::TrainCodec { config, out } => codec_cmd(&config, &out)?,
        Cmd::TrainEmbedder { config, out } => embedder_cmd(&config, &out)?,
        Cmd::Train {
            config,
            codec,
            resume,
            out,
        } => train_cmd(&config, codec.as_deref(), resume.as_deref(), &out)?,
        Cmd::Sample { gen } => generate_cmd("sample", &gen, None)?,
        Cmd::Ablate { gen, disable } => generate_cmd("ablate", &gen, Some(disable))?,
        Cmd::Eval { embedder, videos } => eval_cmd(&embedder, &videos)?,
        Cmd::Gradcheck => return gradcheck_cmd(),
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &Option<PathBuf>) -> dsdn::Result<Config> {
    let cfg = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn base_manifest(command: &str, cfg: &Config) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "config": cfg.canonical_string(),
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> dsdn::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AppError::Format(e.to_string()))?;
    Ok(std::fs::write(path, text + "\n")?)
}

/// Manifest location for subcommands whose output is a single file:
/// `runs/codec.bin` gets `runs/codec.manifest.json` beside it.
fn sibling_manifest(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn ensure_parent(out: &Path) -> dsdn::Result<()> {
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn data_gen(config: &Option<PathBuf>, holdout: bool, out: &Path) -> dsdn::Result<()> {
    let cfg = load_config(config)?;
    let (n, seed, split) = if holdout {
        (cfg.holdout_size, cfg.holdout_seed, "holdout")
    } else {
        (cfg.corpus_size, cfg.corpus_seed, "train")
    };
    let clips = make_corpus(n, seed, cfg.frames, cfg.canvas)?;
    std::fs::create_dir_all(out)?;
    dump_corpus(&clips, out)?;
    let hash = corpus_hash(&clips);
    let mut m = base_manifest("data gen", &cfg);
    m["split"] = split.into();
    m["seed"] = seed.into();
    m["clips"] = n.into();
    m["corpus_hash"] = hash.clone().into();
    write_json(&out.join("manifest.json"), &m)?;
    println!("wrote {n} {split} clips to {}", out.display());
    println!("corpus {hash}");
    Ok(())
}

fn codec_cmd(config: &Option<PathBuf>, out: &Path) -> dsdn::Result<()> {
    let cfg = load_config(config)?;
    let clips = make_corpus(cfg.corpus_size, cfg.corpus_seed, cfg.frames, cfg.canvas)?;
    let (codec, report) = train_codec(&cfg, &clips)?;
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {i} {l:.6}");
    }
    if report.halted_early {
        println!("halted early: epoch loss stopped improving");
    }
    ensure_parent(out)?;
    codec.save(&cfg, out)?;
    let mut m = base_manifest("train-codec", &cfg);
    m["seed"] = cfg.init_seed.into();
    m["epochs_run"] = report.epoch_losses.len().into();
    m["latent_scale"] = codec.latent_scale.into();
    write_json(&sibling_manifest(out), &m)?;
    println!("codec -> {} (latent_scale {:.4})", out.display(), codec.latent_scale);
    Ok(())
}

fn embedder_cmd(config: &Option<PathBuf>, out: &Path) -> dsdn::Result<()> {
    let cfg = load_config(config)?;
    let clips = make_corpus(cfg.corpus_size, cfg.corpus_seed, cfg.frames, cfg.canvas)?;
    let (emb, losses) = train_embedder(&cfg, &clips)?;
    for (i, l) in losses.iter().enumerate() {
        println!("{i} {l:.6}");
    }
    ensure_parent(out)?;
    emb.save(&cfg, out)?;
    let mut m = base_manifest("train-embedder", &cfg);
    m["seed"] = cfg.embedder_seed.into();
    m["steps_run"] = losses.len().into();
    write_json(&sibling_manifest(out), &m)?;
    println!("embedder -> {}", out.display());
    Ok(())
}

fn train_cmd(
    config: &Option<PathBuf>,
    codec: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
) -> dsdn::Result<()> {
    let mut state = match resume {
        Some(ckpt) => load_checkpoint(ckpt)?,
        None => {
            let cfg = load_config(config)?;
            let path = codec.expect("clap enforces --codec without --resume");
            let (codec, _trained_under) = Codec::load(path)?;
            if codec.canvas != cfg.canvas
                || codec.latent_size != cfg.latent_size
                || codec.channels != cfg.model_channels()
                || codec.mode != cfg.codec_mode
            {
                return Err(AppError::Config(format!(
                    "codec at {} was built for a different geometry \
                     (canvas {}, latent {}x{} ch {}); run config wants \
                     canvas {}, latent {}x{} ch {}",
                    path.display(),
                    codec.canvas,
                    codec.latent_size,
                    codec.latent_size,
                    codec.channels,
                    cfg.canvas,
                    cfg.latent_size,
                    cfg.latent_size,
                    cfg.model_channels(),
                )));
            }
            init_state(&cfg, codec)?
        }
    };
    let cfg = state.model.cfg.clone();
    let clips = make_corpus(cfg.corpus_size, cfg.corpus_seed, cfg.frames, cfg.canvas)?;
    let latents = state.codec.encode_corpus(&clips)?;
    let ids: Vec<Vec<usize>> = clips
        .iter()
        .map(|c| state.model.vocab.tokenize(&c.caption, cfg.max_len))
        .collect();
    let sched = NoiseSchedule::linear(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;
    ensure_parent(out)?;
    // Rewrite the checkpoint every chunk so an interrupted run can be
    // picked up with --resume; per-step noise substreams make the
    // continuation identical to the uninterrupted run.
    const SAVE_EVERY: usize = 50;
    while (state.step as usize) < cfg.train_steps {
        let chunk = (cfg.train_steps - state.step as usize).min(SAVE_EVERY);
        train(&mut state, &latents, &ids, &sched, chunk, |s| {
            println!("{}", s.log_line())
        })?;
        save_checkpoint(&state, out)?;
    }
    if !out.exists() {
        save_checkpoint(&state, out)?;
    }
    let mut m = base_manifest("train", &cfg);
    m["seed"] = cfg.train_seed.into();
    m["step"] = state.step.into();
    m["resumed"] = resume.is_some().into();
    write_json(&sibling_manifest(out), &m)?;
    println!("checkpoint -> {} (step {})", out.display(), state.step);
    Ok(())
}

fn generate_cmd(command: &str, gen: &GenArgs, disable: Option<sampler::Ablate>) -> dsdn::Result<()> {
    let state = load_checkpoint(&gen.checkpoint)?;
    let cfg = &state.model.cfg;
    let req = SampleRequest {
        prompt: gen.prompt.clone(),
        frames: gen.frames.unwrap_or(cfg.frames),
        steps: gen.steps.unwrap_or(cfg.t_steps),
        seed: gen.seed,
        disable,
    };
    let video = sampler::generate(&state, &req)?;
    std::fs::create_dir_all(&gen.out)?;
    for (k, frame) in video.iter().enumerate() {
        ppm::write_frame(
            &gen.out.join(format!("frame_{k:03}.ppm")),
            frame,
            state.codec.canvas,
            state.codec.canvas,
        )?;
    }
    let mut m = sampler::manifest(cfg, &req);
    m["command"] = command.into();
    m["version"] = env!("CARGO_PKG_VERSION").into();
    write_json(&gen.out.join("manifest.json"), &m)?;
    println!("{} frames -> {}", video.len(), gen.out.display());
    Ok(())
}

/// Frames plus prompt for one video directory. Accepts both generation
/// output (manifest.json) and corpus dumps (caption.txt).
fn read_video_dir(dir: &Path) -> dsdn::Result<(Vec<Vec<f32>>, String)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".ppm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AppError::Config(format!(
            "{}: no frame_*.ppm files",
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let (rgb, _, _) = ppm::read_frame(p)?;
        frames.push(rgb);
    }
    let manifest = dir.join("manifest.json");
    let prompt = if manifest.exists() {
        let text = std::fs::read_to_string(&manifest)?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| AppError::Format(e.to_string()))?;
        v["prompt"]
            .as_str()
            .ok_or_else(|| {
                AppError::Format(format!("{}: no `prompt` field", manifest.display()))
            })?
            .to_string()
    } else {
        let caption = dir.join("caption.txt");
        if !caption.exists() {
            return Err(AppError::Config(format!(
                "{}: neither manifest.json nor caption.txt",
                dir.display()
            )));
        }
        std::fs::read_to_string(&caption)?.trim().to_string()
    };
    Ok((frames, prompt))
}

fn eval_cmd(embedder: &Path, videos: &[PathBuf]) -> dsdn::Result<()> {
    let (emb, _cfg) = Embedder::load(embedder)?;
    let mut sums = (0.0, 0.0);
    for dir in videos {
        let (frames, prompt) = read_video_dir(dir)?;
        let fc = frame_consistency(&emb, &frames)?;
        let ta = textual_alignment(&emb, &frames, &prompt)?;
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        println!("{id} {fc:.6} {ta:.6}");
        sums.0 += fc;
        sums.1 += ta;
    }
    let n = videos.len() as f64;
    println!("mean {:.6} {:.6}", sums.0 / n, sums.1 / n);
    Ok(())
}

fn gradcheck_cmd() -> dsdn::Result<ExitCode> {
    const TOL: f64 = 1e-4;
    let mut all_ok = true;
    for r in dsdn_core::gradcheck::kernel_suite(3, 0)? {
        let ok = r.passes(TOL);
        all_ok &= ok;
        println!(
            "{} {:.3e} {}",
            r.name,
            r.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    let m = dsdn::fdcheck::full_model_check(2, 17)?;
    let ok = m.passed(TOL);
    all_ok &= ok;
    if ok {
        println!("assembled_model {:.3e} ok", m.max_rel_err);
    } else {
        println!(
            "assembled_model {:.3e} FAIL (worst {})",
            m.max_rel_err, m.worst_param
        );
    }
    if all_ok {
        println!("all gradients within {TOL:.0e}");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradient check FAILED (tolerance {TOL:.0e})");
        Ok(ExitCode::from(2))
    }
}

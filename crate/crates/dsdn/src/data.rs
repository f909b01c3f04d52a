//! Synthetic captioned clips: one hard-edged colored shape translating at
//! constant speed over a black canvas. Small enough to regenerate from a
//! seed on every run, so nothing downstream ever needs to read data back
//! from disk to reproduce a result.

use crate::error::{config_err, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Right,
    Left,
    Up,
    Down,
}

impl Shape {
    pub fn word(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
        }
    }
}

impl Color {
    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    fn rgb(&self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }
}

impl Direction {
    pub fn word(&self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    fn velocity(&self, speed: i64) -> (i64, i64) {
        match self {
            Direction::Right => (speed, 0),
            Direction::Left => (-speed, 0),
            Direction::Up => (0, -speed),
            Direction::Down => (0, speed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub direction: Direction,
    /// Pixels per frame.
    pub speed: i64,
    /// Top-left corner of the shape's bounding box at frame 0.
    pub start: (i64, i64),
    /// Bounding-box side length in pixels.
    pub size: usize,
    pub frames: usize,
    pub canvas: usize,
}

/// Frames as channel-major planes: `[frames][3 * canvas * canvas]`.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<Vec<f32>>,
    pub caption: String,
    pub canvas: usize,
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        format!(
            "a {} {} moving {}",
            self.color.word(),
            self.shape.word(),
            self.direction.word()
        )
    }

    /// Recover the captioned fields from a caption string, for tests and
    /// for pairing generated clips back to their prompts.
    pub fn parse_caption(caption: &str) -> Option<(Color, Shape, Direction)> {
        let w: Vec<&str> = caption.split_whitespace().collect();
        if w.len() != 5 || w[0] != "a" || w[3] != "moving" {
            return None;
        }
        let color = match w[1] {
            "red" => Color::Red,
            "green" => Color::Green,
            "blue" => Color::Blue,
            _ => return None,
        };
        let shape = match w[2] {
            "square" => Shape::Square,
            "circle" => Shape::Circle,
            _ => return None,
        };
        let direction = match w[4] {
            "right" => Direction::Right,
            "left" => Direction::Left,
            "up" => Direction::Up,
            "down" => Direction::Down,
            _ => return None,
        };
        Some((color, shape, direction))
    }
}

/// Deterministic raster of the spec. Per-frame positions are the start
/// displaced by `k * speed` along the motion axis, clamped so the full
/// bounding box stays on canvas.
pub fn render(spec: &SceneSpec) -> Result<Clip> {
    let cv = spec.canvas as i64;
    let sz = spec.size as i64;
    if sz <= 0 || sz > cv {
        return config_err(format!(
            "shape size {} does not fit canvas {}",
            spec.size, spec.canvas
        ));
    }
    if spec.frames < 2 {
        return config_err(format!("clip needs >= 2 frames, got {}", spec.frames));
    }
    let (vx, vy) = spec.direction.velocity(spec.speed);
    let rgb = spec.color.rgb();
    let plane = spec.canvas * spec.canvas;
    let mut frames = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames as i64 {
        let x = (spec.start.0 + k * vx).clamp(0, cv - sz);
        let y = (spec.start.1 + k * vy).clamp(0, cv - sz);
        let mut buf = vec![0.0f32; 3 * plane];
        for py in y..y + sz {
            for px in x..x + sz {
                let inside = match spec.shape {
                    Shape::Square => true,
                    Shape::Circle => {
                        // Center and radius in half-pixel units keeps the
                        // disc symmetric for even sizes.
                        let cx2 = 2 * x + sz - 1;
                        let cy2 = 2 * y + sz - 1;
                        let dx = 2 * px - cx2;
                        let dy = 2 * py - cy2;
                        dx * dx + dy * dy <= (sz - 1) * (sz - 1)
                    }
                };
                if inside {
                    let at = (py * cv + px) as usize;
                    for c in 0..3 {
                        buf[c * plane + at] = rgb[c];
                    }
                }
            }
        }
        frames.push(buf);
    }
    Ok(Clip {
        frames,
        caption: spec.caption(),
        canvas: spec.canvas,
    })
}

/// Seeded corpus over the full spec space. Draw order per clip: shape,
/// color, direction, speed, size, start x, start y.
pub fn make_corpus(n: usize, seed: u64, frames: usize, canvas: usize) -> Result<Vec<Clip>> {
    if n < 1 {
        return config_err("corpus size must be >= 1".to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = if rng.gen_range(0..2) == 0 {
            Shape::Square
        } else {
            Shape::Circle
        };
        let color = match rng.gen_range(0..3) {
            0 => Color::Red,
            1 => Color::Green,
            _ => Color::Blue,
        };
        let direction = match rng.gen_range(0..4) {
            0 => Direction::Right,
            1 => Direction::Left,
            2 => Direction::Up,
            _ => Direction::Down,
        };
        let speed = rng.gen_range(1..=2);
        let size = 12 + 4 * rng.gen_range(0..3usize);
        let hi = (canvas - size) as i64;
        let x = rng.gen_range(0..=hi);
        let y = rng.gen_range(0..=hi);
        out.push(render(&SceneSpec {
            shape,
            color,
            direction,
            speed,
            start: (x, y),
            size,
            frames,
            canvas,
        })?);
    }
    Ok(out)
}

/// Content hash over every pixel byte and caption, in corpus order.
pub fn corpus_hash(clips: &[Clip]) -> String {
    let mut h = Sha256::new();
    for clip in clips {
        h.update(clip.caption.as_bytes());
        h.update([0u8]);
        for frame in &clip.frames {
            for &v in frame {
                h.update([(v.clamp(0.0, 1.0) * 255.0).round() as u8]);
            }
        }
    }
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Dump clips as `clip_NNN/frame_NNN.ppm` plus `caption.txt`.
pub fn dump_corpus(clips: &[Clip], dir: &std::path::Path) -> Result<()> {
    for (i, clip) in clips.iter().enumerate() {
        let clip_dir = dir.join(format!("clip_{i:03}"));
        std::fs::create_dir_all(&clip_dir)?;
        for (k, frame) in clip.frames.iter().enumerate() {
            crate::ppm::write_frame(
                &clip_dir.join(format!("frame_{k:03}.ppm")),
                frame,
                clip.canvas,
                clip.canvas,
            )?;
        }
        std::fs::write(clip_dir.join("caption.txt"), &clip.caption)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SceneSpec {
        SceneSpec {
            shape: Shape::Square,
            color: Color::Red,
            direction: Direction::Right,
            speed: 1,
            start: (3, 10),
            size: 4,
            frames: 4,
            canvas: 32,
        }
    }

    #[test]
    fn zero_speed_gives_identical_frames() {
        let clip = render(&SceneSpec { speed: 0, ..spec() }).unwrap();
        for f in &clip.frames[1..] {
            assert_eq!(f, &clip.frames[0]);
        }
    }

    #[test]
    fn constant_speed_displaces_linearly() {
        let clip = render(&spec()).unwrap();
        let plane = 32 * 32;
        // Frame 2 at speed 1 from x=3 puts the box's left edge at x=5.
        let red = &clip.frames[2][..plane];
        let leftmost = (0..plane).find(|&i| red[i] > 0.0).unwrap() % 32;
        assert_eq!(leftmost, 5);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render(&spec()).unwrap();
        let b = render(&spec()).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.caption, b.caption);
    }

    #[test]
    fn trajectory_clamps_at_the_border() {
        let clip = render(&SceneSpec {
            start: (26, 10),
            speed: 2,
            frames: 6,
            ..spec()
        })
        .unwrap();
        // Once clamped the box parks flush against the right edge.
        let plane = 32 * 32;
        let last = &clip.frames[5][..plane];
        let leftmost = (0..plane).find(|&i| last[i] > 0.0).unwrap() % 32;
        assert_eq!(leftmost, 28);
    }

    #[test]
    fn oversized_shape_is_rejected() {
        assert!(render(&SceneSpec { size: 33, ..spec() }).is_err());
    }

    #[test]
    fn caption_parses_back_to_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let clips = make_corpus(1, rng.gen(), 2, 32).unwrap();
            let (c, s, d) = SceneSpec::parse_caption(&clips[0].caption).unwrap();
            assert!(clips[0].caption.contains(c.word()));
            assert!(clips[0].caption.contains(s.word()));
            assert!(clips[0].caption.contains(d.word()));
        }
    }

    #[test]
    fn corpora_differ_across_seeds_and_repeat_within_one() {
        let a = make_corpus(5, 1, 2, 32).unwrap();
        let b = make_corpus(5, 1, 2, 32).unwrap();
        let c = make_corpus(5, 2, 2, 32).unwrap();
        assert_eq!(corpus_hash(&a), corpus_hash(&b));
        assert_ne!(corpus_hash(&a), corpus_hash(&c));
    }

    #[test]
    fn caption_slots_are_all_covered() {
        let clips = make_corpus(100, 1, 2, 64).unwrap();
        for word in [
            "red", "green", "blue", "square", "circle", "right", "left", "up", "down",
        ] {
            assert!(
                clips.iter().any(|c| c.caption.split_whitespace().any(|w| w == word)),
                "missing {word}"
            );
        }
    }

    // Recorded once from the shipped generator at the default corpus
    // settings (n=100, seed=1, 8 frames, 64px canvas).
    #[test]
    fn default_corpus_hash_is_stable() {
        let clips = make_corpus(100, 1, 8, 64).unwrap();
        assert_eq!(
            corpus_hash(&clips),
            "6f7d8ed2b0a456c1abf7901b719e13dfe5b2c3c19879a74e864312cb22afc09b"
        );
    }
}

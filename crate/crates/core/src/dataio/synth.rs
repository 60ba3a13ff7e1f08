//! Synthetic moving-shape videos with per-pixel ground-truth labels.

use serde::{Deserialize, Serialize};

use crate::dataio::clip::VideoClip;
use crate::dataio::image::{Image, LabelImage};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Square,
    Circle,
}

/// A rigid shape moving at constant velocity and bouncing off the canvas walls.
/// `x`, `y` locate the top-left corner of its bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub size: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Top and bottom colors of the static background gradient.
    pub background: [[f64; 3]; 2],
    /// Amplitude of the static sinusoidal background texture.
    pub texture: f64,
    pub shapes: Vec<ShapeSpec>,
}

impl SynthConfig {
    /// Draws 1 to `max_shapes` shapes (at most 4) with random size, color,
    /// start position and velocity.
    pub fn random(width: usize, height: usize, frames: usize, max_shapes: usize, rng: &mut Rng) -> Self {
        let n = rng.int_inclusive(1, max_shapes.clamp(1, 4));
        let short = width.min(height);
        let hue0 = rng.uniform();
        let shapes = (0..n)
            .map(|i| {
                let size = rng.int_inclusive((short / 6).max(1), (short / 3).max(1));
                let kind = if rng.bernoulli(0.5) { ShapeKind::Square } else { ShapeKind::Circle };
                let speed = |rng: &mut Rng| {
                    let s = rng.uniform_range(0.5, 2.5);
                    if rng.bernoulli(0.5) {
                        s
                    } else {
                        -s
                    }
                };
                ShapeSpec {
                    kind,
                    size,
                    x: rng.uniform_range(0.0, (width - size) as f64),
                    y: rng.uniform_range(0.0, (height - size) as f64),
                    vx: speed(rng),
                    vy: speed(rng),
                    color: hsv_to_rgb((hue0 + i as f64 / n as f64) % 1.0, 0.85, 0.95),
                }
            })
            .collect();
        let dark = |rng: &mut Rng| [rng.uniform_range(0.05, 0.35), rng.uniform_range(0.05, 0.35), rng.uniform_range(0.05, 0.35)];
        SynthConfig { width, height, frames, background: [dark(rng), dark(rng)], texture: 0.06, shapes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("synthetic clip needs positive size and frame count".into()));
        }
        if self.shapes.is_empty() || self.shapes.len() > 4 {
            return Err(Error::Config(format!("1 to 4 shapes required, got {}", self.shapes.len())));
        }
        for s in &self.shapes {
            if s.size == 0 || s.size > self.width || s.size > self.height {
                return Err(Error::Config(format!(
                    "shape of size {} does not fit a {}x{} canvas",
                    s.size, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One step of 1-D motion on `[0, max]` with mirror reflection at the walls.
pub fn reflect_step(pos: f64, vel: f64, max: f64) -> (f64, f64) {
    let (mut p, mut v) = (pos + vel, vel);
    if max <= 0.0 {
        return (0.0, v);
    }
    loop {
        if p < 0.0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2.0 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// Shape positions for every frame.
pub fn trajectories(config: &SynthConfig) -> Vec<Vec<(f64, f64)>> {
    config
        .shapes
        .iter()
        .map(|s| {
            let max_x = (config.width - s.size) as f64;
            let max_y = (config.height - s.size) as f64;
            let (mut x, mut y, mut vx, mut vy) = (s.x, s.y, s.vx, s.vy);
            let mut out = Vec::with_capacity(config.frames);
            for _ in 0..config.frames {
                out.push((x, y));
                (x, vx) = reflect_step(x, vx, max_x);
                (y, vy) = reflect_step(y, vy, max_y);
            }
            out
        })
        .collect()
}

fn covers(kind: ShapeKind, size: usize, x0: f64, y0: f64, px: f64, py: f64) -> bool {
    let s = size as f64;
    match kind {
        ShapeKind::Square => px >= x0 && px < x0 + s && py >= y0 && py < y0 + s,
        ShapeKind::Circle => {
            let r = s / 2.0;
            let (dx, dy) = (px - (x0 + r), py - (y0 + r));
            dx * dx + dy * dy < r * r
        }
    }
}

/// Renders the clip; label ids are `shape index + 1`, later shapes drawn on top.
pub fn gen_synthetic(id: &str, config: &SynthConfig) -> Result<VideoClip> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let mut background = Image::filled(w, h, [0.0; 3]);
    let [top, bottom] = config.background;
    for y in 0..h {
        let a = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        for x in 0..w {
            let tex = config.texture * ((x as f64 * 0.45).sin() * (y as f64 * 0.3).cos());
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = (top[c] * (1.0 - a) + bottom[c] * a + tex).clamp(0.0, 1.0);
            }
            background.set_pixel(y, x, px);
        }
    }
    let paths = trajectories(config);
    let mut frames = Vec::with_capacity(config.frames);
    let mut labels = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let mut img = background.clone();
        let mut lab = LabelImage::zeros(w, h);
        for (si, s) in config.shapes.iter().enumerate() {
            let (x0, y0) = paths[si][t];
            let lo_x = x0.floor().max(0.0) as usize;
            let lo_y = y0.floor().max(0.0) as usize;
            for y in lo_y..(lo_y + s.size + 1).min(h) {
                for x in lo_x..(lo_x + s.size + 1).min(w) {
                    if covers(s.kind, s.size, x0, y0, x as f64 + 0.5, y as f64 + 0.5) {
                        img.set_pixel(y, x, s.color);
                        lab.data[y * w + x] = (si + 1) as u8;
                    }
                }
            }
        }
        frames.push(img.quantized());
        labels.push(lab);
    }
    Ok(VideoClip { id: id.to_string(), frames, labels: Some(labels) })
}

/// `count` random clips named `{prefix}{i:04}`, each drawn from its own keyed stream.
pub fn gen_dataset(
    prefix: &str,
    count: usize,
    size: usize,
    frames: usize,
    max_shapes: usize,
    seed: u64,
) -> Result<Vec<VideoClip>> {
    (0..count)
        .map(|i| {
            let mut rng = Rng::keyed(seed, "synthetic-clip", i as u64);
            gen_synthetic(&format!("{prefix}{i:04}"), &SynthConfig::random(size, size, frames, max_shapes, &mut rng))
        })
        .collect()
}

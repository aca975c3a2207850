//! Moving-shapes toy dataset and dataset-directory loading.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::frame::Image;
use crate::lowlight::{build_sequence, load_sequence, write_sequence, SequenceRecord, SynthConfig};
use crate::mask::MaskMap;
use crate::rng::{derive_rng, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: usize,
    pub train: usize,
    pub val: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 20,
            objects: 2,
            train: 24,
            val: 8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Diamond,
}

#[derive(Debug, Clone)]
struct Mover {
    shape: Shape,
    radius: f64,
    color: [f32; 3],
    pos: (f64, f64),
    vel: (f64, f64),
}

impl Mover {
    fn covers(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.pos.0, x - self.pos.1);
        match self.shape {
            Shape::Disc => dy * dy + dx * dx <= self.radius * self.radius,
            Shape::Square => dy.abs() <= self.radius * 0.85 && dx.abs() <= self.radius * 0.85,
            Shape::Diamond => dy.abs() + dx.abs() <= self.radius * 1.2,
        }
    }

    fn advance(&mut self, h: f64, w: f64) {
        for (p, v, lim) in [(&mut self.pos.0, &mut self.vel.0, h), (&mut self.pos.1, &mut self.vel.1, w)] {
            *p += *v;
            let (lo, hi) = (self.radius * 0.5, lim - 1.0 - self.radius * 0.5);
            if *p < lo {
                *p = 2.0 * lo - *p;
                *v = -*v;
            } else if *p > hi {
                *p = 2.0 * hi - *p;
                *v = -*v;
            }
        }
    }
}

/// Normal-light frames and label maps of one moving-shapes clip. Objects
/// are bright shapes on a dimmer textured background; later objects occlude
/// earlier ones.
pub fn toy_sequence(cfg: &ToyConfig, seed: u64) -> (Vec<Image>, Vec<MaskMap>) {
    let mut rng = derive_rng(seed, "toy-sequence");
    let (h, w) = (cfg.height, cfg.width);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
    let (gy, gx) = (rng.random_range(-0.15..0.15f32), rng.random_range(-0.15..0.15f32));
    let texture: Vec<f32> = (0..h * w).map(|_| rng.random_range(-0.05..0.05)).collect();
    let mut movers: Vec<Mover> = (0..cfg.objects)
        .map(|_| {
            let radius = rng.random_range(6.0..11.0) * h.min(w) as f64 / 64.0;
            let speed = rng.random_range(1.0..3.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Mover {
                shape: match rng.random_range(0..3) {
                    0 => Shape::Disc,
                    1 => Shape::Square,
                    _ => Shape::Diamond,
                },
                radius,
                color: std::array::from_fn(|_| rng.random_range(0.65..1.0)),
                pos: (
                    rng.random_range(radius..h as f64 - radius),
                    rng.random_range(radius..w as f64 - radius),
                ),
                vel: (speed * angle.sin(), speed * angle.cos()),
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        let mut img = Image::filled(h, w, 3, 0.0);
        let mut mask = MaskMap::background(h, w);
        for y in 0..h {
            for x in 0..w {
                let shade = gy * (y as f32 / h as f32 - 0.5) + gx * (x as f32 / w as f32 - 0.5) + texture[y * w + x];
                let mut px = base.map(|b| (b + shade).clamp(0.0, 1.0));
                for (k, m) in movers.iter().enumerate() {
                    if m.covers(y as f64 + 0.5, x as f64 + 0.5) {
                        px = m.color;
                        mask.set(y, x, k as u8 + 1);
                    }
                }
                for (c, v) in px.into_iter().enumerate() {
                    img.set(y, x, c, v);
                }
            }
        }
        frames.push(img);
        masks.push(mask);
        for m in &mut movers {
            m.advance(h as f64, w as f64);
        }
    }
    (frames, masks)
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub train: Vec<SequenceRecord>,
    pub val: Vec<SequenceRecord>,
}

/// Synthesises the toy dataset (degradation + events) for a root seed.
pub fn toy_dataset(cfg: &ToyConfig, seed: u64, synth: &SynthConfig, policy: ExecPolicy) -> Result<ToyDataset> {
    let names: Vec<String> = (0..cfg.train)
        .map(|i| format!("train_{i:03}"))
        .chain((0..cfg.val).map(|i| format!("val_{i:03}")))
        .collect();
    let built = exec::map(policy, &names, |_, name| {
        let s = derive_seed(seed, name);
        let (frames, masks) = toy_sequence(cfg, s);
        build_sequence(name, &frames, &masks, s, synth)
    });
    let mut all = built.into_iter().collect::<Result<Vec<_>>>()?;
    let val = all.split_off(cfg.train);
    Ok(ToyDataset { train: all, val })
}

pub fn write_dataset(ds: &ToyDataset, root: &Path) -> Result<()> {
    for (split, seqs) in [("train", &ds.train), ("val", &ds.val)] {
        for s in seqs {
            write_sequence(s, &root.join(split).join(s.id()))?;
        }
    }
    Ok(())
}

/// Sequence directories under `dir` (or `dir` itself when it holds one).
pub fn sequence_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("meta.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.join("meta.json").is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SequenceRecord>> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!("dataset path {} is not a directory", dir.display())));
    }
    let dirs = sequence_dirs(dir)?;
    if dirs.is_empty() {
        return Err(Error::invalid(format!("no sequences found under {}", dir.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

//! Clip augmentation: random scale, crop, horizontal flip and temporal
//! reversal, applied identically to frames, masks and voxel grids.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::VoxelGrid;
use crate::frame::Image;
use crate::mask::MaskMap;
use crate::rng::Rng;

/// Aligned training clip. `voxels[t]` holds the events leading into frame
/// `t`; `voxels[0]` is the zero grid, as at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainClip {
    pub frames: Vec<Image>,
    pub masks: Vec<MaskMap>,
    pub voxels: Vec<VoxelGrid>,
}

impl TrainClip {
    pub fn new(frames: Vec<Image>, masks: Vec<MaskMap>, voxels: Vec<VoxelGrid>) -> Result<Self> {
        let clip = Self { frames, masks, voxels };
        clip.validate()?;
        Ok(clip)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames.len();
        if t == 0 || self.masks.len() != t || self.voxels.len() != t {
            return Err(Error::invalid(format!(
                "clip has {t} frames, {} masks and {} voxel grids",
                self.masks.len(),
                self.voxels.len()
            )));
        }
        let (h, w) = (self.height(), self.width());
        let aligned = self.frames.iter().all(|f| (f.height(), f.width()) == (h, w))
            && self.masks.iter().all(|m| (m.height(), m.width()) == (h, w))
            && self.voxels.iter().all(|v| (v.height(), v.width()) == (h, w));
        if !aligned {
            return Err(Error::invalid("clip frames, masks and voxel grids differ in size"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale: bool,
    pub scale_range: (f64, f64),
    /// Square crop side; `None` keeps the full frame.
    pub crop: Option<usize>,
    pub flip: bool,
    pub reverse: bool,
    /// Photometric jitter of the frames: a global gain in `[1/2, 2]`, per
    /// channel gains in `[0.8, 1.25]` and a random channel order. Log-domain
    /// events are invariant to a global gain, so voxel grids are untouched.
    pub color: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: true,
            scale_range: (0.8, 1.2),
            crop: Some(64),
            flip: true,
            reverse: true,
            color: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            scale: false,
            scale_range: (1.0, 1.0),
            crop: None,
            flip: false,
            reverse: false,
            color: false,
        }
    }
}

fn color_jitter(clip: &mut TrainClip, rng: &mut Rng) {
    let gain: f32 = 2f32.powf(rng.random_range(-1.0..=1.0));
    let channels = clip.frames[0].channels();
    let per: Vec<f32> = (0..channels).map(|_| 1.25f32.powf(rng.random_range(-1.0..=1.0))).collect();
    let mut order: Vec<usize> = (0..channels).collect();
    order.shuffle(rng);
    for f in &mut clip.frames {
        let src = f.data().to_vec();
        for (px, out) in src.chunks_exact(channels).zip(f.data_mut().chunks_exact_mut(channels)) {
            for c in 0..channels {
                out[c] = (px[order[c]] * gain * per[c]).clamp(0.0, 1.0);
            }
        }
    }
}

/// Bilinear resampling of `c` interleaved planes (half-pixel centres).
fn resample(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize, hwc: bool) -> Vec<f32> {
    let taps = |n: usize, on: usize| -> Vec<(usize, usize, f32)> {
        (0..on)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let idx = |y: usize, x: usize, ch: usize| if hwc { (y * w + x) * c + ch } else { (ch * h + y) * w + x };
    let oidx = |y: usize, x: usize, ch: usize| if hwc { (y * ow + x) * c + ch } else { (ch * oh + y) * ow + x };
    let mut out = vec![0.0; oh * ow * c];
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[idx(y0, x0, ch)] * (1.0 - fx) + src[idx(y0, x1, ch)] * fx;
                let bot = src[idx(y1, x0, ch)] * (1.0 - fx) + src[idx(y1, x1, ch)] * fx;
                out[oidx(oy, ox, ch)] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn nearest_index(o: usize, n: usize, on: usize) -> usize {
    (((o as f64 + 0.5) * n as f64 / on as f64) as usize).min(n - 1)
}

/// Geometric window applied to every plane: resize to `size`, then take
/// `crop` at `offset`, optionally mirrored.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    size: (usize, usize),
    offset: (usize, usize),
    crop: (usize, usize),
    flip: bool,
}

impl Geometry {
    fn window<V: Copy>(&self, src: &[V], c: usize, hwc: bool) -> Vec<V> {
        let (h, w) = self.size;
        let (ch, cw) = self.crop;
        let (y0, x0) = self.offset;
        let mut out = Vec::with_capacity(ch * cw * c);
        let at = |y: usize, x: usize, k: usize| if hwc { (y * w + x) * c + k } else { (k * h + y) * w + x };
        let sx = |x: usize| if self.flip { x0 + cw - 1 - x } else { x0 + x };
        if hwc {
            for y in 0..ch {
                for x in 0..cw {
                    for k in 0..c {
                        out.push(src[at(y0 + y, sx(x), k)]);
                    }
                }
            }
        } else {
            for k in 0..c {
                for y in 0..ch {
                    for x in 0..cw {
                        out.push(src[at(y0 + y, sx(x), k)]);
                    }
                }
            }
        }
        out
    }

    fn image(&self, img: &Image) -> Image {
        let c = img.channels();
        let scaled = if self.size == (img.height(), img.width()) {
            img.data().to_vec()
        } else {
            resample(img.data(), img.height(), img.width(), c, self.size.0, self.size.1, true)
        };
        Image::new(self.crop.0, self.crop.1, c, self.window(&scaled, c, true)).expect("sizes agree")
    }

    fn mask(&self, m: &MaskMap) -> MaskMap {
        let (h, w) = self.size;
        let scaled: Vec<u8> = if (h, w) == (m.height(), m.width()) {
            m.labels().to_vec()
        } else {
            (0..h * w)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    m.get(nearest_index(y, m.height(), h), nearest_index(x, m.width(), w))
                })
                .collect()
        };
        MaskMap::new(self.crop.0, self.crop.1, self.window(&scaled, 1, true)).expect("sizes agree")
    }

    fn voxel(&self, v: &VoxelGrid) -> VoxelGrid {
        let b = v.bins();
        let scaled = if self.size == (v.height(), v.width()) {
            v.data().to_vec()
        } else {
            resample(v.data(), v.height(), v.width(), b, self.size.0, self.size.1, false)
        };
        VoxelGrid::from_data(b, self.crop.0, self.crop.1, v.span(), self.window(&scaled, b, false))
            .expect("sizes agree")
    }
}

/// Reverses playback order. The reversed clip's first frame has no
/// preceding events and gets a zero grid; every later grid is the
/// time-reversed slice between the corresponding original frames.
pub fn reverse_clip(clip: &TrainClip) -> TrainClip {
    let t = clip.len();
    let frames = clip.frames.iter().rev().cloned().collect();
    let masks = clip.masks.iter().rev().cloned().collect();
    let first = &clip.voxels[0];
    let mut voxels = vec![VoxelGrid::zeros(first.bins(), first.height(), first.width(), first.span())];
    voxels.extend((1..t).map(|k| clip.voxels[t - k].time_reversed()));
    TrainClip { frames, masks, voxels }
}

pub fn flip_clip(clip: &TrainClip) -> TrainClip {
    let (h, w) = (clip.height(), clip.width());
    let g = Geometry {
        size: (h, w),
        offset: (0, 0),
        crop: (h, w),
        flip: true,
    };
    apply(clip, &g)
}

fn apply(clip: &TrainClip, g: &Geometry) -> TrainClip {
    TrainClip {
        frames: clip.frames.iter().map(|f| g.image(f)).collect(),
        masks: clip.masks.iter().map(|m| g.mask(m)).collect(),
        voxels: clip.voxels.iter().map(|v| g.voxel(v)).collect(),
    }
}

pub fn augment(clip: &TrainClip, cfg: &AugmentConfig, rng: &mut Rng) -> Result<TrainClip> {
    clip.validate()?;
    let (h, w) = (clip.height(), clip.width());
    if let Some(c) = cfg.crop {
        if c == 0 || c > h || c > w {
            return Err(Error::invalid(format!("crop {c} does not fit a {h}x{w} frame")));
        }
    }
    let (lo, hi) = cfg.scale_range;
    if cfg.scale && !(lo > 0.0 && lo <= hi) {
        return Err(Error::Config(format!("invalid scale range ({lo}, {hi})")));
    }
    let mut size = (h, w);
    if cfg.scale {
        // never shrink below the crop
        let min_side = h.min(w) as f64;
        let lo = cfg.crop.map_or(lo, |c| lo.max(c as f64 / min_side));
        let s = if hi > lo { rng.random_range(lo..=hi) } else { lo.max(hi) };
        let scaled = |n: usize| ((n as f64 * s).round() as usize).max(1);
        size = (scaled(h), scaled(w));
        if let Some(c) = cfg.crop {
            size = (size.0.max(c), size.1.max(c));
        }
    }
    let crop = cfg.crop.map_or(size, |c| (c, c));
    let offset = (
        if size.0 > crop.0 { rng.random_range(0..=size.0 - crop.0) } else { 0 },
        if size.1 > crop.1 { rng.random_range(0..=size.1 - crop.1) } else { 0 },
    );
    let flip = cfg.flip && rng.random_bool(0.5);
    let reverse = cfg.reverse && rng.random_bool(0.5);
    let g = Geometry {
        size,
        offset,
        crop,
        flip,
    };
    let mut out = if size == (h, w) && crop == (h, w) && !flip {
        clip.clone()
    } else {
        apply(clip, &g)
    };
    if cfg.color {
        color_jitter(&mut out, rng);
    }
    Ok(if reverse { reverse_clip(&out) } else { out })
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{add_noise, apply_curve, interpolate_frames, sample_params, DegradationParams};
use crate::error::{Error, Result};
use crate::event::{
    read_events_file, simulate_events, voxelize, write_events_file, EventStream, SimulatorConfig,
    VoxelGrid, DEFAULT_BINS,
};
use crate::frame::Image;
use crate::mask::MaskMap;
use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Spacing of the input frames in microseconds (40 000 µs = 25 fps).
    pub frame_interval_us: u64,
    /// Interpolation factor; 4 lifts 25 fps to 100 fps.
    pub interp_factor: usize,
    pub simulator: SimulatorConfig,
    pub bins: usize,
    /// Fixed degradation parameters; sampled per sequence when `None`.
    pub params: Option<DegradationParams>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frame_interval_us: 40_000,
            interp_factor: 4,
            simulator: SimulatorConfig::default(),
            bins: DEFAULT_BINS,
            params: None,
        }
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub timestamps_us: Vec<u64>,
    pub params: DegradationParams,
    pub seed: u64,
    pub bins: usize,
    pub interp_factor: usize,
    pub simulator: SimulatorConfig,
}

/// One synthetic sequence. `slices[k]` holds the events between frame `k`
/// and frame `k + 1`, so frame `t ≥ 1` pairs with `slices[t - 1]`.
#[derive(Debug, Clone)]
pub struct SequenceRecord {
    pub meta: SequenceMeta,
    pub normal: Vec<Image>,
    pub low: Vec<Image>,
    pub masks: Vec<MaskMap>,
    pub events: EventStream,
    pub slices: Vec<EventStream>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }

    pub fn id(&self) -> &str {
        &self.meta.id
    }

    /// Voxel grid of `E_{t−1→t}`; frame 0 has no preceding slice and gets a
    /// zero grid.
    pub fn voxel(&self, t: usize) -> Result<VoxelGrid> {
        let (h, w, bins) = (self.meta.height, self.meta.width, self.meta.bins);
        if t == 0 {
            let t0 = self.meta.timestamps_us[0];
            return Ok(VoxelGrid::zeros(bins, h, w, (t0, t0)));
        }
        let ts = &self.meta.timestamps_us;
        voxelize(&self.slices[t - 1], ts[t - 1], ts[t], bins)
    }

    pub fn voxels(&self) -> Result<Vec<VoxelGrid>> {
        (0..self.len()).map(|t| self.voxel(t)).collect()
    }
}

/// Degrade, densify, simulate and slice one sequence.
pub fn build_sequence(
    id: &str,
    normal: &[Image],
    masks: &[MaskMap],
    seed: u64,
    cfg: &SynthConfig,
) -> Result<SequenceRecord> {
    if normal.len() != masks.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} masks",
            normal.len(),
            masks.len()
        )));
    }
    if normal.len() < 2 {
        return Err(Error::invalid("a sequence needs at least 2 frames"));
    }
    let (h, w) = (normal[0].height(), normal[0].width());
    for (i, (f, m)) in normal.iter().zip(masks).enumerate() {
        if f.height() != h || f.width() != w || m.height() != h || m.width() != w {
            return Err(Error::invalid(format!("frame/mask {i} size differs from {h}x{w}")));
        }
    }
    if cfg.bins == 0 {
        return Err(Error::invalid("bins must be positive"));
    }

    let mut rng: Rng = seeded(seed);
    let params = match cfg.params {
        Some(p) => {
            p.validate()?;
            p
        }
        None => sample_params(&mut rng),
    };
    let timestamps: Vec<u64> = (0..normal.len() as u64)
        .map(|k| k * cfg.frame_interval_us)
        .collect();

    let curved: Vec<Image> = normal
        .iter()
        .map(|f| apply_curve(f, &params))
        .collect::<Result<_>>()?;
    let gray: Vec<Image> = curved.iter().map(Image::to_gray).collect();
    let (dense, dense_ts) = interpolate_frames(&gray, &timestamps, cfg.interp_factor)?;
    let events = simulate_events(&dense, &dense_ts, &cfg.simulator)?;

    let slices = timestamps
        .windows(2)
        .enumerate()
        .map(|(k, win)| events.slice(win[0], win[1], k == 0))
        .collect();

    let low = curved
        .iter()
        .map(|f| add_noise(f, params.sigma, &mut rng).map(|f| f.quantized_u8()))
        .collect::<Result<_>>()?;

    Ok(SequenceRecord {
        meta: SequenceMeta {
            id: id.to_string(),
            height: h,
            width: w,
            timestamps_us: timestamps,
            params,
            seed,
            bins: cfg.bins,
            interp_factor: cfg.interp_factor,
            simulator: cfg.simulator,
        },
        normal: normal.iter().map(Image::quantized_u8).collect(),
        low,
        masks: masks.to_vec(),
        events,
        slices,
    })
}

fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the on-disk layout: `frames_normal/`, `frames_low/`, `masks/`,
/// `events.evt1` and `meta.json`.
pub fn write_sequence(record: &SequenceRecord, dir: &Path) -> Result<()> {
    for sub in ["frames_normal", "frames_low", "masks"] {
        mkdir(&dir.join(sub))?;
    }
    for (i, ((n, l), m)) in record
        .normal
        .iter()
        .zip(&record.low)
        .zip(&record.masks)
        .enumerate()
    {
        n.save_png(&dir.join("frames_normal").join(frame_name(i)))?;
        l.save_png(&dir.join("frames_low").join(frame_name(i)))?;
        m.save_png(&dir.join("masks").join(frame_name(i)))?;
    }
    write_events_file(&record.events, &dir.join("events.evt1"))?;
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&record.meta)?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}

pub fn load_sequence(dir: &Path) -> Result<SequenceRecord> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SequenceMeta = serde_json::from_str(&text)?;
    let n = meta.timestamps_us.len();
    let mut normal = Vec::with_capacity(n);
    let mut low = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let normal_path = dir.join("frames_normal").join(frame_name(i));
        if normal_path.exists() {
            normal.push(Image::load_png(&normal_path)?);
        }
        low.push(Image::load_png(&dir.join("frames_low").join(frame_name(i)))?);
        masks.push(MaskMap::load_png(&dir.join("masks").join(frame_name(i)))?);
    }
    let events = read_events_file(&dir.join("events.evt1"))?;
    if events.height() != meta.height || events.width() != meta.width {
        return Err(Error::invalid(format!(
            "{}: event resolution {}x{} disagrees with meta {}x{}",
            dir.display(),
            events.height(),
            events.width(),
            meta.height,
            meta.width
        )));
    }
    let slices = meta
        .timestamps_us
        .windows(2)
        .enumerate()
        .map(|(k, win)| events.slice(win[0], win[1], k == 0))
        .collect();
    Ok(SequenceRecord {
        meta,
        normal,
        low,
        masks,
        events,
        slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_frames(n: usize, size: usize, step: usize) -> (Vec<Image>, Vec<MaskMap>) {
        let mut frames = Vec::new();
        let mut masks = Vec::new();
        for k in 0..n {
            let mut img = Image::filled(size, size, 3, 0.0);
            let mut m = MaskMap::background(size, size);
            for y in 4..10 {
                for x in (2 + k * step)..(8 + k * step) {
                    for c in 0..3 {
                        img.set(y, x, c, 1.0);
                    }
                    m.set(y, x, 1);
                }
            }
            frames.push(img);
            masks.push(m);
        }
        (frames, masks)
    }

    #[test]
    fn static_sequence_has_empty_slices() {
        let frames = vec![Image::filled(8, 8, 3, 0.8); 3];
        let masks = vec![MaskMap::background(8, 8); 3];
        let cfg = SynthConfig {
            params: Some(DegradationParams {
                alpha: 0.95,
                beta: 0.7,
                gamma: 8.0,
                sigma: 0.0,
            }),
            ..SynthConfig::default()
        };
        let rec = build_sequence("s", &frames, &masks, 1, &cfg).unwrap();
        assert_eq!(rec.slices.len(), 2);
        assert!(rec.slices.iter().all(|s| s.is_empty()));
    }

    #[test]
    fn two_frames_factor_one_gives_one_slice() {
        let (frames, masks) = square_frames(2, 16, 1);
        let cfg = SynthConfig {
            interp_factor: 1,
            ..SynthConfig::default()
        };
        let rec = build_sequence("s", &frames, &masks, 2, &cfg).unwrap();
        assert_eq!(rec.slices.len(), 1);
        assert_eq!(rec.slices[0], rec.events);
    }

    #[test]
    fn slices_partition_the_stream() {
        let (frames, masks) = square_frames(5, 16, 1);
        let rec = build_sequence("s", &frames, &masks, 9, &SynthConfig::default()).unwrap();
        let joined: Vec<_> = rec.slices.iter().flat_map(|s| s.events().to_vec()).collect();
        assert_eq!(joined, rec.events.events());
        assert!(!rec.events.is_empty());
    }

    #[test]
    fn mismatched_counts_fail() {
        let (frames, masks) = square_frames(3, 16, 1);
        assert!(build_sequence("s", &frames, &masks[..2], 0, &SynthConfig::default()).is_err());
    }

    #[test]
    fn layout_round_trip() {
        let (frames, masks) = square_frames(3, 16, 2);
        let rec = build_sequence("s", &frames, &masks, 4, &SynthConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(&rec, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.meta, rec.meta);
        assert_eq!(back.events, rec.events);
        assert_eq!(back.masks, rec.masks);
        assert_eq!(back.slices, rec.slices);
        assert_eq!(back.low, rec.low);
        assert_eq!(back.normal, rec.normal);
    }
}

use super::EventStream;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 5;

/// `bins × height × width` temporal histogram of an event slice.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    bins: usize,
    height: usize,
    width: usize,
    span: (u64, u64),
    data: Vec<f32>,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, height: usize, width: usize, span: (u64, u64)) -> Self {
        Self {
            bins,
            height,
            width,
            span,
            data: vec![0.0; bins * height * width],
        }
    }

    pub fn from_data(
        bins: usize,
        height: usize,
        width: usize,
        span: (u64, u64),
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != bins * height * width {
            return Err(Error::invalid(format!(
                "voxel data has {} values, expected {bins}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            bins,
            height,
            width,
            span,
            data,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn span(&self) -> (u64, u64) {
        self.span
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> f32 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// The grid of the time-reversed stream: bin axis reversed and polarity
    /// negated.
    pub fn time_reversed(&self) -> VoxelGrid {
        let plane = self.height * self.width;
        let mut data = vec![0.0; self.data.len()];
        for b in 0..self.bins {
            let src = &self.data[b * plane..(b + 1) * plane];
            let dst_b = self.bins - 1 - b;
            for (d, &s) in data[dst_b * plane..(dst_b + 1) * plane].iter_mut().zip(src) {
                *d = -s;
            }
        }
        VoxelGrid { data, ..self.clone() }
    }
}

/// Bilinear temporal binning of the events with `t ∈ [t_start, t_end]`.
pub fn voxelize(stream: &EventStream, t_start: u64, t_end: u64, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::invalid("voxel grid needs at least one bin"));
    }
    if t_start >= t_end {
        return Err(Error::invalid(format!(
            "empty voxel span [{t_start}, {t_end}]"
        )));
    }
    let (h, w) = (stream.height(), stream.width());
    let mut grid = VoxelGrid::zeros(bins, h, w, (t_start, t_end));
    let scale = (bins - 1) as f64 / (t_end - t_start) as f64;
    let lo = stream.events().partition_point(|e| e.t < t_start);
    let hi = stream.events().partition_point(|e| e.t <= t_end);
    for e in &stream.events()[lo..hi] {
        let pos = (e.t - t_start) as f64 * scale;
        let base = pos.floor() as usize;
        let sign = e.polarity.sign() as f64;
        let pixel = e.y as usize * w + e.x as usize;
        for b in base..(base + 2).min(bins) {
            let weight = (1.0 - (b as f64 - pos).abs()).max(0.0);
            if weight > 0.0 {
                grid.data[b * h * w + pixel] += (sign * weight) as f32;
            }
        }
    }
    Ok(grid)
}

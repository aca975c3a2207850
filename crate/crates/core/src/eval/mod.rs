//! DAVIS-style region (J) and boundary (F) metrics with per-sequence and
//! aggregate reporting.

mod report;

pub use report::{evaluate, evaluate_dirs, FrameScore, MetricReport, SequenceInput, SequenceScore};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::lowlight::SequenceRecord;
use crate::mask::MaskMap;
use crate::model::VosModel;

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "{} mask values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_labels(mask: &MaskMap, object: u8) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            data: mask.binary(object),
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn check(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::invalid(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Mask pixels with an 8-neighbour outside the mask or the image.
    pub fn boundary(&self) -> BinaryMask {
        let (h, w) = (self.height as isize, self.width as isize);
        let data = (0..self.data.len())
            .map(|i| {
                if !self.data[i] {
                    return false;
                }
                let (y, x) = ((i / self.width) as isize, (i % self.width) as isize);
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (ny, nx) = (y + dy, x + dx);
                        ny < 0 || nx < 0 || ny >= h || nx >= w || !self.data[(ny * w + nx) as usize]
                    })
                })
            })
            .collect();
        BinaryMask {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Dilation by a disc of radius `r`.
    pub fn dilate(&self, r: usize) -> BinaryMask {
        let ri = r as isize;
        let offsets: Vec<(isize, isize)> = (-ri..=ri)
            .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
            .filter(|(dy, dx)| dy * dy + dx * dx <= ri * ri)
            .collect();
        let (h, w) = (self.height as isize, self.width as isize);
        let mut data = vec![false; self.data.len()];
        for (i, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = ((i / self.width) as isize, (i % self.width) as isize);
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && ny < h && nx < w {
                    data[(ny * w + nx) as usize] = true;
                }
            }
        }
        BinaryMask {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pixel tolerance for [`boundary_f`]: `ceil(0.008 · diagonal)`.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

/// Boundary precision and recall under tolerance `tol`.
pub fn boundary_precision_recall(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> Result<(f64, f64)> {
    pred.check(gt)?;
    let (pb, gb) = (pred.boundary(), gt.boundary());
    let (pd, gd) = (pb.dilate(tol), gb.dilate(tol));
    let hit = |b: &BinaryMask, d: &BinaryMask| b.data.iter().zip(&d.data).filter(|(&x, &y)| x && y).count();
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok((ratio(hit(&pb, &gd), pb.count()), ratio(hit(&gb, &pd), gb.count())))
}

/// Boundary F-measure; 1 when both boundaries are empty, 0 when P + R = 0.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> Result<f64> {
    pred.check(gt)?;
    if pred.boundary().count() == 0 && gt.boundary().count() == 0 {
        return Ok(1.0);
    }
    let (p, r) = boundary_precision_recall(pred, gt, tol)?;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Runs the model over each sequence (low-light frames + event voxels),
/// seeded with the first ground-truth mask.
pub fn predict_records(model: &VosModel, records: &[SequenceRecord], policy: ExecPolicy) -> Result<Vec<SequenceInput>> {
    exec::map(policy, records, |_, r| {
        let voxels = r.voxels()?;
        let predictions = model.segment_sequence(&r.low, &voxels, &r.masks[0])?;
        Ok(SequenceInput {
            id: r.id().to_string(),
            predictions,
            ground_truth: r.masks.clone(),
        })
    })
    .into_iter()
    .collect()
}

pub fn evaluate_model(model: &VosModel, records: &[SequenceRecord], policy: ExecPolicy) -> Result<MetricReport> {
    Ok(evaluate(&predict_records(model, records, policy)?, policy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> BinaryMask {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw
            })
            .collect();
        BinaryMask::new(h, w, data).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        let gt = rect(20, 20, 5, 5, 10, 10);
        assert_eq!(jaccard(&gt, &gt).unwrap(), 1.0);
        assert_eq!(jaccard(&rect(20, 20, 0, 0, 3, 3), &rect(20, 20, 10, 10, 3, 3)).unwrap(), 0.0);
        let shifted = rect(20, 20, 5, 10, 10, 10);
        assert!((jaccard(&shifted, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let e = BinaryMask::empty(4, 4);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert!(jaccard(&e, &BinaryMask::empty(4, 5)).is_err());
    }

    #[test]
    fn boundary_of_square_is_its_ring() {
        let sq = rect(10, 10, 2, 2, 5, 5);
        assert_eq!(sq.boundary().count(), 16);
        // touching the border counts as boundary
        assert_eq!(rect(3, 3, 0, 0, 3, 3).boundary().count(), 8);
    }

    #[test]
    fn boundary_f_examples() {
        let gt = rect(20, 20, 5, 5, 10, 10);
        assert_eq!(boundary_f(&gt, &gt, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&BinaryMask::empty(20, 20), &gt, 1).unwrap(), 0.0);
        let e = BinaryMask::empty(20, 20);
        assert_eq!(boundary_f(&e, &e, 2).unwrap(), 1.0);
    }

    #[test]
    fn tolerance_follows_diagonal() {
        assert_eq!(default_tolerance(64, 64), 1);
        assert_eq!(default_tolerance(480, 854), 8);
    }
}

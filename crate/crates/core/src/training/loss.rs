//! Segmentation loss: weighted BCE plus Soft Jaccard per active object,
//! summed over predicted frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::MaskMap;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const PROB_CLAMP: f64 = 1e-7;
pub const SJ_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_bce: f64,
    pub w_sj: f64,
    /// Clip length T (annotated first frame included).
    pub clip_len: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_bce: 0.5,
            w_sj: 0.5,
            clip_len: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_bce >= 0.0 && self.w_sj >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.clip_len == 0 {
            return Err(Error::Config("clip length must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::invalid(format!(
            "probability map has {a} values, ground truth {b}"
        )));
    }
    Ok(())
}

fn clamp<T: Real>(p: T) -> T {
    let lo = T::of(PROB_CLAMP);
    p.max(lo).min(T::one() - lo)
}

pub fn bce_loss<T: Real>(prob: &[T], gt: &[T]) -> Result<T> {
    check_len(prob.len(), gt.len())?;
    let sum = prob.iter().zip(gt).fold(T::zero(), |acc, (&p, &g)| {
        let p = clamp(p);
        acc - (g * p.ln() + (T::one() - g) * (T::one() - p).ln())
    });
    Ok(sum / T::of(prob.len() as f64))
}

fn bce_grad<T: Real>(prob: &[T], gt: &[T], scale: T, out: &mut [T]) {
    let lo = T::of(PROB_CLAMP);
    let n = T::of(prob.len() as f64);
    for ((o, &p), &g) in out.iter_mut().zip(prob).zip(gt) {
        if p < lo || p > T::one() - lo {
            continue;
        }
        *o += scale * -(g / p - (T::one() - g) / (T::one() - p)) / n;
    }
}

fn jaccard_terms<T: Real>(prob: &[T], gt: &[T]) -> (T, T) {
    let eps = T::of(SJ_SMOOTH);
    prob.iter().zip(gt).fold((eps, eps), |(i, u), (&p, &g)| {
        (i + p * g, u + p + g - p * g)
    })
}

pub fn soft_jaccard_loss<T: Real>(prob: &[T], gt: &[T]) -> Result<T> {
    check_len(prob.len(), gt.len())?;
    let (i, u) = jaccard_terms(prob, gt);
    Ok(T::one() - i / u)
}

fn soft_jaccard_grad<T: Real>(prob: &[T], gt: &[T], scale: T, out: &mut [T]) {
    let (i, u) = jaccard_terms(prob, gt);
    let u2 = u * u;
    for (o, &g) in out.iter_mut().zip(gt) {
        // d/dp of 1 − I/U with dI/dp = g, dU/dp = 1 − g
        *o += scale * -(g * u - i * (T::one() - g)) / u2;
    }
}

/// Per-term totals of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub sj: f64,
}

fn binary_plane<T: Real>(mask: &MaskMap, object: u8) -> Vec<T> {
    mask.labels()
        .iter()
        .map(|&l| if l == object { T::one() } else { T::zero() })
        .collect()
}

/// Loss over softmax probabilities `[N, S+1, H, W]` of one predicted frame
/// with targets `gt[n]`; objects `1..=active[n]` contribute. Returns the
/// value and its gradient w.r.t. `probs`, each divided by `N`.
pub fn frame_loss<T: Real>(
    probs: &Tensor<T>,
    gt: &[&MaskMap],
    active: &[usize],
    weights: &LossWeights,
) -> Result<(LossParts, Tensor<T>)> {
    let (n, c, h, w) = probs.dims4()?;
    if gt.len() != n || active.len() != n {
        return Err(Error::invalid(format!(
            "{n} predictions but {} targets and {} object counts",
            gt.len(),
            active.len()
        )));
    }
    let hw = h * w;
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Tensor::zeros(probs.shape());
    let mut parts = LossParts::default();
    for s in 0..n {
        if (gt[s].height(), gt[s].width()) != (h, w) {
            return Err(Error::invalid("ground-truth mask size differs from prediction"));
        }
        if active[s] >= c {
            return Err(Error::invalid(format!(
                "{} active objects exceed {} slots",
                active[s],
                c - 1
            )));
        }
        for o in 1..=active[s] {
            let off = (s * c + o) * hw;
            let p = &probs.data()[off..off + hw];
            let g = binary_plane::<T>(gt[s], o as u8);
            let bce = bce_loss(p, &g)?;
            let sj = soft_jaccard_loss(p, &g)?;
            let gs = &mut grad.data_mut()[off..off + hw];
            bce_grad(p, &g, T::of(weights.w_bce) * inv_n, gs);
            soft_jaccard_grad(p, &g, T::of(weights.w_sj) * inv_n, gs);
            let (bce, sj) = (bce.to_f64_lossy() / n as f64, sj.to_f64_lossy() / n as f64);
            parts.bce += bce;
            parts.sj += sj;
            parts.total += weights.w_bce * bce + weights.w_sj * sj;
        }
    }
    Ok((parts, grad))
}

/// Graph node carrying [`frame_loss`] summed over predicted frames.
pub fn clip_loss<T: Real>(
    g: &mut Graph<T>,
    probs: &[Var],
    gt: &[Vec<&MaskMap>],
    active: &[usize],
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    if probs.len() != gt.len() || probs.is_empty() {
        return Err(Error::invalid(format!(
            "{} predicted frames but {} target frames",
            probs.len(),
            gt.len()
        )));
    }
    let mut acc: Option<Var> = None;
    let mut parts = LossParts::default();
    for (&p, masks) in probs.iter().zip(gt) {
        let (fp, grad) = frame_loss(g.value(p), masks, active, weights)?;
        parts.total += fp.total;
        parts.bce += fp.bce;
        parts.sj += fp.sj;
        let node = g.custom_scalar(p, T::of(fp.total), grad)?;
        acc = Some(match acc {
            Some(a) => g.add(a, node)?,
            None => node,
        });
    }
    Ok((acc.expect("non-empty"), parts))
}

/// Softmax over channels `0..=active` of a `[N, S+1, H, W]` logit map;
/// higher channels get probability 0.
fn softmax_channels(logits: &Tensor<f64>, active: usize) -> Result<Tensor<f64>> {
    let (n, c_all, h, w) = logits.dims4()?;
    let c = (active + 1).min(c_all);
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for s in 0..n {
        for p in 0..hw {
            let at = |ch: usize| (s * c_all + ch) * hw + p;
            let m = (0..c).map(|ch| logits.data()[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (logits.data()[at(ch)] - m).exp()).sum();
            for ch in 0..c {
                out.data_mut()[at(ch)] = (logits.data()[at(ch)] - m).exp() / z;
            }
        }
    }
    Ok(out)
}

/// Clip loss from raw logits. `logits[k]` predicts frame `k + 1` of `gt`;
/// `gt[0]` is the given annotation and fixes the active object count; the
/// softmax runs over background and the active objects.
pub fn total_loss(logits: &[Tensor<f64>], gt: &[MaskMap], weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    if gt.is_empty() || logits.len() + 1 != gt.len() {
        return Err(Error::invalid(format!(
            "{} logit maps for {} ground-truth frames; expected one fewer",
            logits.len(),
            gt.len()
        )));
    }
    let active = gt[0].max_label() as usize;
    let mut total = 0.0;
    for (l, m) in logits.iter().zip(&gt[1..]) {
        let probs = softmax_channels(l, active)?;
        total += frame_loss(&probs, &[m], &[active], weights)?.0.total;
    }
    Ok(total)
}

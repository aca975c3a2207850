//! Low-light degradation `L = β·(α·I)^γ + n`, `n ~ N(0, σ²)`, and the
//! synthetic sequence builder.

mod sequence;

pub use sequence::{build_sequence, load_sequence, write_sequence, SequenceMeta, SequenceRecord, SynthConfig};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Image;
use crate::rng::Rng;

pub const ALPHA_RANGE: (f64, f64) = (0.9, 1.0);
pub const BETA_RANGE: (f64, f64) = (0.5, 1.0);
pub const GAMMA_RANGE: (f64, f64) = (7.0, 9.0);
pub const SIGMA_RANGE: (f64, f64) = (0.0, 0.05);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        };
        check("alpha", self.alpha, ALPHA_RANGE)?;
        check("beta", self.beta, BETA_RANGE)?;
        check("gamma", self.gamma, GAMMA_RANGE)?;
        check("sigma", self.sigma, SIGMA_RANGE)
    }

    pub fn noise_free(self) -> Self {
        Self { sigma: 0.0, ..self }
    }
}

pub fn sample_params(rng: &mut Rng) -> DegradationParams {
    let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    DegradationParams {
        alpha: uniform(ALPHA_RANGE),
        beta: uniform(BETA_RANGE),
        gamma: uniform(GAMMA_RANGE),
        sigma: uniform(SIGMA_RANGE),
    }
}

/// Applies the degradation curve and noise, then clamps to [0, 1].
pub fn degrade_frame(image: &Image, params: &DegradationParams, rng: &mut Rng) -> Result<Image> {
    let curved = apply_curve(image, params)?;
    add_noise(&curved, params.sigma, rng)
}

/// Noise-free part `β·(α·I)^γ`.
pub fn apply_curve(image: &Image, params: &DegradationParams) -> Result<Image> {
    params.validate()?;
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
    }
    let mut out = image.clone();
    for v in out.data_mut() {
        let l = params.beta * (params.alpha * *v as f64).powf(params.gamma);
        *v = l.clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, σ²)` noise per pixel-channel and clamps to [0, 1].
/// `σ = 0` leaves the image untouched and draws nothing from `rng`.
pub fn add_noise(image: &Image, sigma: f64, rng: &mut Rng) -> Result<Image> {
    if !(sigma >= SIGMA_RANGE.0 && sigma <= SIGMA_RANGE.1) {
        return Err(Error::invalid(format!("sigma = {sigma} outside {SIGMA_RANGE:?}")));
    }
    let mut out = image.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    for v in out.data_mut() {
        *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Linear per-pixel blending that inserts `factor − 1` frames per interval.
pub fn interpolate_frames(
    frames: &[Image],
    timestamps: &[u64],
    factor: usize,
) -> Result<(Vec<Image>, Vec<u64>)> {
    if factor == 0 {
        return Err(Error::invalid("interpolation factor must be at least 1"));
    }
    if frames.len() != timestamps.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} timestamps",
            frames.len(),
            timestamps.len()
        )));
    }
    if frames.windows(2).any(|w| !w[0].same_size(&w[1]) || w[0].channels() != w[1].channels()) {
        return Err(Error::invalid("frames differ in size"));
    }
    if timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("timestamps must be strictly increasing"));
    }
    if factor == 1 || frames.len() < 2 {
        return Ok((frames.to_vec(), timestamps.to_vec()));
    }
    let mut out_frames = Vec::with_capacity((frames.len() - 1) * factor + 1);
    let mut out_ts = Vec::with_capacity(out_frames.capacity());
    for k in 0..frames.len() - 1 {
        let (a, b) = (&frames[k], &frames[k + 1]);
        let (t0, t1) = (timestamps[k], timestamps[k + 1]);
        out_frames.push(a.clone());
        out_ts.push(t0);
        for j in 1..factor {
            let w = j as f32 / factor as f32;
            let mut f = a.clone();
            for (v, &vb) in f.data_mut().iter_mut().zip(b.data()) {
                *v = (1.0 - w) * *v + w * vb;
            }
            out_frames.push(f);
            out_ts.push(t0 + (t1 - t0) * j as u64 / factor as u64);
        }
    }
    out_frames.push(frames[frames.len() - 1].clone());
    out_ts.push(timestamps[timestamps.len() - 1]);
    Ok((out_frames, out_ts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn px(v: f32) -> Image {
        Image::filled(1, 1, 1, v)
    }

    fn params(alpha: f64, beta: f64, gamma: f64, sigma: f64) -> DegradationParams {
        DegradationParams {
            alpha,
            beta,
            gamma,
            sigma,
        }
    }

    #[test]
    fn unit_fixed_point() {
        let out = degrade_frame(&px(1.0), &params(1.0, 1.0, 7.0, 0.0), &mut seeded(0)).unwrap();
        assert_eq!(out.data()[0], 1.0);
    }

    #[test]
    fn zero_stays_zero() {
        let img = Image::filled(3, 3, 3, 0.0);
        let out = degrade_frame(&img, &params(0.93, 0.6, 8.5, 0.0), &mut seeded(0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_intensity_scalar() {
        let out = degrade_frame(&px(0.5), &params(1.0, 0.5, 8.0, 0.0), &mut seeded(0)).unwrap();
        assert_eq!(out.data()[0], 0.001953125);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(degrade_frame(&px(0.5), &params(0.8, 0.5, 8.0, 0.0), &mut seeded(0)).is_err());
        assert!(degrade_frame(&px(0.5), &params(1.0, 0.5, 8.0, 0.06), &mut seeded(0)).is_err());
        assert!(degrade_frame(&px(1.5), &params(1.0, 0.5, 8.0, 0.0), &mut seeded(0)).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let img = Image::filled(4, 4, 3, 0.7);
        let p = params(0.95, 0.8, 7.5, 0.04);
        let a = degrade_frame(&img, &p, &mut seeded(11)).unwrap();
        let b = degrade_frame(&img, &p, &mut seeded(11)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        assert_eq!(sample_params(&mut seeded(3)), sample_params(&mut seeded(3)));
        let mut rng = seeded(5);
        let samples: Vec<_> = (0..10_000).map(|_| sample_params(&mut rng)).collect();
        assert!(samples.iter().all(|p| p.validate().is_ok()));
        let mean_beta = samples.iter().map(|p| p.beta).sum::<f64>() / samples.len() as f64;
        assert!((mean_beta - 0.75).abs() < 0.01, "mean beta {mean_beta}");
    }

    #[test]
    fn interpolation_identity_and_blend() {
        let frames = vec![px(0.0), px(1.0)];
        let (f, t) = interpolate_frames(&frames, &[0, 4000], 1).unwrap();
        assert_eq!(f, frames);
        assert_eq!(t, vec![0, 4000]);
        let (f, t) = interpolate_frames(&frames, &[0, 4000], 4).unwrap();
        let values: Vec<f32> = f.iter().map(|i| i.data()[0]).collect();
        assert_eq!(values, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(t, vec![0, 1000, 2000, 3000, 4000]);
        assert!(interpolate_frames(&frames, &[0, 4000], 0).is_err());
    }
}

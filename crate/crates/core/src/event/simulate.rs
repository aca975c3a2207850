use serde::{Deserialize, Serialize};

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::frame::Image;

/// Log-units slack when comparing a signal against a threshold level, so that
/// a change of exactly `k·C` computed in floating point yields `k` events.
const LEVEL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub contrast_threshold_pos: f64,
    pub contrast_threshold_neg: f64,
    pub log_eps: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            contrast_threshold_pos: 0.15,
            contrast_threshold_neg: 0.15,
            log_eps: 1e-3,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.contrast_threshold_pos) || !ok(self.contrast_threshold_neg) {
            return Err(Error::invalid("contrast thresholds must be positive"));
        }
        if !ok(self.log_eps) {
            return Err(Error::invalid("log_eps must be positive"));
        }
        Ok(())
    }
}

/// Simulates events from gray intensity frames, parallel over pixels.
pub fn simulate_events(
    frames: &[Image],
    timestamps: &[u64],
    cfg: &SimulatorConfig,
) -> Result<EventStream> {
    simulate_events_with(frames, timestamps, cfg, ExecPolicy::Parallel)
}

/// Per-pixel log-intensity is interpolated linearly between frames; an event
/// fires each time the signal moves one contrast threshold away from the
/// level of the previous event at that pixel.
pub fn simulate_events_with(
    frames: &[Image],
    timestamps: &[u64],
    cfg: &SimulatorConfig,
    policy: ExecPolicy,
) -> Result<EventStream> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::invalid(format!(
            "event simulation needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if timestamps.len() != frames.len() {
        return Err(Error::invalid(format!(
            "{} frames but {} timestamps",
            frames.len(),
            timestamps.len()
        )));
    }
    if timestamps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("timestamps must be strictly increasing"));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    for (i, f) in frames.iter().enumerate() {
        if f.height() != h || f.width() != w {
            return Err(Error::invalid(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                f.height(),
                f.width()
            )));
        }
        if f.channels() != 1 {
            return Err(Error::invalid(format!(
                "frame {i} has {} channels, simulator expects intensity images",
                f.channels()
            )));
        }
    }
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::invalid("resolution exceeds 16-bit range"));
    }

    let log_frames: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| {
            f.data()
                .iter()
                .map(|&v| (v as f64 + cfg.log_eps).ln())
                .collect()
        })
        .collect();
    Ok(simulate_log_planes(&log_frames, h, w, timestamps, cfg, policy))
}

/// Simulation on precomputed log-intensity planes (row-major `h × w` each).
/// Inputs must already satisfy the checks done by [`simulate_events_with`].
pub fn simulate_log_planes(
    log_frames: &[Vec<f64>],
    h: usize,
    w: usize,
    timestamps: &[u64],
    cfg: &SimulatorConfig,
    policy: ExecPolicy,
) -> EventStream {
    let per_row = exec::map_range(policy, h, |y| {
        let mut out = Vec::new();
        let mut signal = vec![0.0; log_frames.len()];
        for x in 0..w {
            for (s, lf) in signal.iter_mut().zip(log_frames) {
                *s = lf[y * w + x];
            }
            pixel_events(&signal, timestamps, cfg, |t, pol| {
                out.push(Event::new(t, x as u16, y as u16, pol))
            });
        }
        out
    });

    let mut events: Vec<Event> = per_row.into_iter().flatten().collect();
    events.sort_unstable_by(Event::canonical_cmp);
    EventStream::from_sorted_unchecked(h, w, events)
}

fn pixel_events(
    signal: &[f64],
    timestamps: &[u64],
    cfg: &SimulatorConfig,
    mut emit: impl FnMut(u64, Polarity),
) {
    let mut reference = signal[0];
    for k in 0..signal.len() - 1 {
        let (a, b) = (signal[k], signal[k + 1]);
        if a == b {
            continue;
        }
        let (t0, t1) = (timestamps[k] as f64, timestamps[k + 1] as f64);
        let crossing_time = |level: f64| {
            let frac = ((level - a) / (b - a)).clamp(0.0, 1.0);
            // Guard against 2999.9999… style results for exact crossings.
            let t = (t0 + frac * (t1 - t0) + 1e-6).floor();
            t.min(t1) as u64
        };
        if b > a {
            let c = cfg.contrast_threshold_pos;
            while b - (reference + c) >= -LEVEL_TOLERANCE {
                reference += c;
                emit(crossing_time(reference), Polarity::Positive);
            }
        } else {
            let c = cfg.contrast_threshold_neg;
            while (reference - c) - b >= -LEVEL_TOLERANCE {
                reference -= c;
                emit(crossing_time(reference), Polarity::Negative);
            }
        }
    }
}

//! Event primitives: simulation from frames, voxel grids and the binary
//! `EVT1` container.

mod container;
mod simulate;
mod voxel;

use std::cmp::Ordering;

pub use container::{read_events, read_events_file, write_events, write_events_file, HEADER_BYTES, RECORD_BYTES};
pub use simulate::{simulate_events, simulate_events_with, simulate_log_planes, SimulatorConfig};
pub use voxel::{voxelize, VoxelGrid, DEFAULT_BINS};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_sign(sign: i8) -> Option<Self> {
        match sign {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// A single brightness-change event. `t` is in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }

    /// Total order: time, then row, column, and positive before negative.
    pub fn canonical_cmp(&self, other: &Event) -> Ordering {
        (self.t, self.y, self.x, -self.polarity.sign()).cmp(&(
            other.t,
            other.y,
            other.x,
            -other.polarity.sign(),
        ))
    }
}

/// Time-ordered events for a sensor of fixed resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    height: usize,
    width: usize,
    events: Vec<Event>,
}

impl EventStream {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            events: Vec::new(),
        }
    }

    /// Builds a stream, sorting events into canonical order. Fails on
    /// out-of-bounds coordinates or a resolution that does not fit in 16 bits.
    pub fn new(height: usize, width: usize, mut events: Vec<Event>) -> Result<Self> {
        if height > u16::MAX as usize || width > u16::MAX as usize {
            return Err(Error::invalid(format!(
                "resolution {height}x{width} exceeds 16-bit range"
            )));
        }
        if let Some(e) = events
            .iter()
            .find(|e| e.x as usize >= width || e.y as usize >= height)
        {
            return Err(Error::invalid(format!(
                "event at ({}, {}) outside {}x{} sensor",
                e.x, e.y, height, width
            )));
        }
        events.sort_unstable_by(Event::canonical_cmp);
        Ok(Self {
            height,
            width,
            events,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t_lo < t <= t_hi`; with `include_lo` the lower bound is closed.
    pub fn slice(&self, t_lo: u64, t_hi: u64, include_lo: bool) -> EventStream {
        let start = if include_lo {
            self.events.partition_point(|e| e.t < t_lo)
        } else {
            self.events.partition_point(|e| e.t <= t_lo)
        };
        let end = self.events.partition_point(|e| e.t <= t_hi);
        EventStream {
            height: self.height,
            width: self.width,
            events: self.events[start..end.max(start)].to_vec(),
        }
    }

    /// Union of two streams of equal resolution, kept in canonical order.
    pub fn merge(&self, other: &EventStream) -> Result<EventStream> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::invalid("cannot merge streams of different resolution"));
        }
        let mut events = Vec::with_capacity(self.len() + other.len());
        events.extend_from_slice(&self.events);
        events.extend_from_slice(&other.events);
        EventStream::new(self.height, self.width, events)
    }

    pub(crate) fn from_sorted_unchecked(height: usize, width: usize, events: Vec<Event>) -> Self {
        Self {
            height,
            width,
            events,
        }
    }
}

//! Event-assisted video object segmentation for low-light video.
//!
//! The crate covers the whole pipeline: ESIM-style event simulation and
//! voxelization ([`event`]), low-light degradation and dataset synthesis
//! ([`lowlight`]), the memory-matching segmentation network with adaptive
//! cross-modal fusion and event-guided matching ([`model`]), training
//! ([`training`]) and DAVIS-style evaluation ([`eval`]).

pub mod dataset;
pub mod error;
pub mod eval;
pub mod event;
pub mod exec;
pub mod frame;
pub mod lowlight;
pub mod mask;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use exec::ExecPolicy;
pub use frame::Image;
pub use mask::MaskMap;

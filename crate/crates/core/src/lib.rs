//! Volume-aware slice propagation for promptable CT segmentation.
//!
//! A CT volume is read as a pseudo-video along one axis. Prompted slices seed
//! a memory bank, and every other slice is segmented by a backend attending to
//! a policy-selected subset of that memory.

pub mod config;
pub mod dataset;
pub mod engine;
pub mod membank;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod preproc;
pub mod profiler;
pub mod prompts;
pub mod volume;

pub use volume::{Axis, Grid2, LogitVolume, Volume, VolumeKind};

//! Trajectory generation as conditional sequence modeling.
//!
//! Synthetic driving scenes are rasterized into bird's-eye-view context,
//! arranged with proposals, key points and future states into one causal
//! token sequence, and decoded by MLP or diffusion heads. The crate also
//! carries the training procedure, a scaling-sweep harness and open-loop
//! planning metrics.

pub mod backbone;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod scenario;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;

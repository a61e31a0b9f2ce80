//! Contrast-based video autofocus toolkit.
//!
//! The crate simulates focal-time scans (sequences of scenes observed
//! through a parametric Gaussian defocus model), implements classical
//! contrast focal metrics with a hill-climber baseline, trains deep-Q
//! autofocus policies (a scalar-metric MLP and an end-to-end CNN), and
//! benchmarks every policy by mean absolute focal-power error and
//! in-focus frame percentage.
//!
//! Modules:
//!
//! - [`image`] — grayscale raster, Sobel/Gaussian kernels, defocus render.
//! - [`pgm`] — binary PGM (P5) codec, the only image file format used.
//! - [`metrics`] — MGM and MLR focal metrics.
//! - [`scan`] — scan construction via dual random walks, focal-stack
//!   replay, the environment step, the ground-truth oracle, disk format.
//! - [`neural`] — MLP Q-network and CNN patch encoder with hand-written
//!   backward passes, RMSProp, and checkpointing.
//! - [`policy`] — fixed / hill-climber / learned policy ladder.
//! - [`train`] — DQN trainer (replay, epsilon-greedy, EMA target).
//! - [`bench`] — evaluation reports, path export, paired bootstrap test.
//! - [`config`], [`cli`] — run configuration and the `afrl` binary.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod metrics;
pub mod neural;
pub mod pgm;
pub mod policy;
pub mod scan;
pub mod texture;
pub mod train;

pub use error::{Error, Result};

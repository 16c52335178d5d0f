//! Camera re-localization from dense scene-coordinate predictions.
//!
//! The crate covers the full chain: pinhole geometry, robust coordinate
//! losses, Kabsch and EPnP solvers, a small dense-network toolkit, the
//! per-point confidence regressor, confidence-scored hypothesis sampling
//! with refinement, a synthetic scene generator, dataset files and the
//! evaluation harness.

pub mod confidence;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod nnet;
pub mod pipeline;
pub mod solvers;
pub mod synth;

pub use error::{RelocError, Result};

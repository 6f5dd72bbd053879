//! Gesture recognition from fused radar and keypoint streams.
//!
//! The crate covers the full pipeline on synthetic data:
//!
//! - [`tensor`] — dense tensors with reverse-mode automatic differentiation
//! - [`nn`] — layers: linear, layer norm, mixer blocks, PointNet
//! - [`model`] — the two-stream fusion network with auxiliary heads
//! - [`radar`] — chirp-sequence radar simulation and target extraction
//! - [`synth`] — kinematic gesture dataset generation
//! - [`train`] — loss, SGD with momentum, modality skipping, evaluation
//! - [`io`] — checkpoints, configs, run directories
//!
//! With the default `parallel` feature, data-parallel loops (generation,
//! evaluation, per-batch gradients, Monte-Carlo calibration) run on rayon.
//! Reduction orders are fixed, so results are bit-identical to the
//! sequential fallback (`--no-default-features`).

pub mod io;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod radar;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

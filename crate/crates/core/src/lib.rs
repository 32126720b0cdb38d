//! Mesh pre-training from motion-capture heatmaps.
//!
//! The crate covers the whole pre-training pipeline at desk scale:
//!
//! - [`body`]: a synthetic articulated body (COCO-17 kinematic tree, forward
//!   kinematics, capsule template with linear blend skinning, joint regressor).
//! - [`camera`]: the virtual camera ring and the weak-perspective model.
//! - [`heatmap`]: Gaussian joint heatmaps, joint masking, augmentation and
//!   patch tokenization.
//! - [`tensor`]: a small reverse-mode autodiff tape with finite-difference checks.
//! - [`model`]: the mesh-regression transformer and its mesh upsampler.
//! - [`losses`], [`metrics`]: training objective and MPJPE / PA-MPJPE / MPVE.
//! - [`container`], [`dataset`]: the binary record container, shards and import.
//! - [`trainer`]: Adam, the learning-rate schedule, pre-training, evaluation
//!   and the ablation harness.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod body;
pub mod camera;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

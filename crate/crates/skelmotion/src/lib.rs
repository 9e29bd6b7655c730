//! Reconstruction of kinematic human motion from 2D joint sequences.
//!
//! The library decomposes 2D keypoint sequences into a single symmetric
//! skeleton (nine shared bone lengths), per-frame joint rotations, a global
//! root trajectory and foot-contact labels, recombined through a
//! differentiable forward-kinematics layer. It ships the full pipeline:
//! dataset ingestion (BVH and raw positions), camera projection and
//! augmentation, in-the-wild confidence modelling, the two-branch temporal
//! convolutional model with per-joint rotation-velocity discriminators, the
//! training loop, evaluation metrics, and BVH export.

pub mod error;
pub mod topology;
pub mod rotation;
pub mod skeleton;
pub mod fk;
pub mod motion;
pub mod camera;
pub mod wild;
pub mod bvh;
pub mod preprocess;
pub mod synth;
pub mod tensorfile;
pub mod dataset;
pub mod network;
pub mod training;
pub mod evaluation;
pub mod pipeline;
pub mod testutil;

pub use error::{Error, Result};

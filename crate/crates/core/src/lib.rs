//! Audio-driven emotional talking-head synthesis at desk scale.
//!
//! The pipeline turns per-frame audio features into neutral 3D facial
//! landmarks (a conditional VAE with a normalizing-flow prior), deforms them
//! toward a target emotion (the landmark deformation model), and renders
//! frames with a tri-plane hash-encoded radiance field conditioned on the
//! landmarks. A procedural data generator with known ground truth backs the
//! test suite.

pub mod engine;
pub mod error;

pub use error::{Error, Result};
pub mod audio;
pub mod camera;
pub mod face;
pub mod frame;
pub mod synth;
pub mod data_io;
pub mod vae;
pub mod ldm;
pub mod metrics;
pub mod nerf;
pub mod pipeline;
pub mod acceptance;

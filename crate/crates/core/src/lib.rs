//! Low-dose fan-beam CT reconstruction with an unrolled network that mixes
//! spatial convolution with graph convolution over the manifold of image
//! patches, plus the FBP and gradient-descent (LEARN-style) baselines it is
//! compared against.
//!
//! Crate layout follows the pipeline: [`geometry`] holds the scan model and
//! the matched projector pair, [`fbp`] the analytic baseline, [`noise`] the
//! low-dose measurement model, [`patchgraph`] the image-to-patch transform
//! and k-NN graph, [`graphconv`]/[`spatialconv`] the two convolution
//! families, [`unrolled`] the block network with hand-derived gradients,
//! [`training`] losses and the optimizer, [`metrics`]/[`data`] evaluation
//! and datasets, and [`experiment`] reproducible end-to-end runs.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fbp;
pub mod geometry;
pub mod graphconv;
pub mod linalg;
pub mod metrics;
pub mod noise;
pub mod patchgraph;
pub mod sparse;
pub mod spatialconv;
pub mod training;
pub mod unrolled;

pub use error::{Error, Result};

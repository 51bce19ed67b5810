//! Joint object detection and probabilistic multi-agent motion forecasting
//! on synthetic bird's-eye-view traffic scenes.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: SE(2) poses, oriented boxes, IoU, NMS;
//! - [`distributions`]: bivariate Gaussians and Von Mises densities with
//!   analytic gradients, plus the unconstrained-to-constrained parameter map;
//! - [`gabp`]: Gaussian Markov random fields and belief propagation, the
//!   probabilistic model the forecaster's message passing is patterned on;
//! - [`nn`]: a small reverse-mode differentiation kernel set (dense layers,
//!   GRU cell, 2-D convolution, scatter-max, bilinear gather) over `f64`;
//! - [`raster`]: LiDAR voxelization, map rasterization, rotated-region
//!   feature extraction;
//! - [`detector`]: anchor-based single-stage detection head;
//! - [`spagnn`]: the relational forecaster (graph message passing over
//!   detected actors with spatially-transformed output states);
//! - [`scenes`]: synthetic scenario generation, LiDAR simulation, dataset
//!   serialization;
//! - [`train`]: joint loss, scheduled sampling, the training loop, and
//!   checkpoint serialization;
//! - [`eval`]: detection AP, displacement/heading errors at an operating
//!   recall, and space-time collision rate.

pub mod distributions;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gabp;
pub mod geometry;
pub mod nn;
pub mod raster;
pub mod scenes;
pub mod spagnn;
pub mod train;

pub use error::{Error, Result};

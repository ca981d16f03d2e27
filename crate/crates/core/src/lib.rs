//! Spherical convolution, spatial-temporal saliency and limited-feedback
//! viewport prediction for equirectangular 360-degree video.
//!
//! Module map:
//!
//! * [`sphere`] - ERP geometry: orientations, pixel mapping, solid angles,
//!   field-of-view heatmaps.
//! * [`numerics`] - tensors, convolution kernels, reverse-mode tape,
//!   gradient checks.
//! * [`spconv`] - rotated-kernel spherical convolution.
//! * [`saliency`] - spatial and temporal spherical CNNs, CBAM, saliency head.
//! * [`fovgru`] - feedback aggregation and the two-layer spherical ConvGRU.
//! * [`fusion`] - global/regional disparity fusion of saliency and FoV maps.
//! * [`evalkit`] - weighted loss, saliency metrics, tile metrics, head
//!   movement classes.
//! * [`trainer`] - SGD with momentum, checkpoints, training loops.
//! * [`harness`] - traces, synthetic scenes, session simulation, file
//!   formats.

pub mod error;
pub mod evalkit;
pub mod fovgru;
pub mod fusion;
pub mod harness;
pub mod numerics;
pub mod par;
pub mod params;
pub mod saliency;
pub mod spconv;
pub mod sphere;
pub mod trainer;

pub use error::{Error, Result};

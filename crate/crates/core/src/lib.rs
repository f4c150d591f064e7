//! Two-stage dynamic inverse rendering on flat-disk Gaussian splats.
//!
//! Stage 1 fits splat geometry and a gated deformation field to a
//! time-varying capture; Stage 2 freezes geometry and recovers albedo,
//! roughness and an environment map by Monte Carlo shading with ray-traced
//! visibility.

pub mod error;
pub mod geometry;
pub mod image;
pub mod deform;
pub mod losses;
pub mod optim;
pub mod scene;
pub mod shading;
pub mod splat;

pub use error::{Error, Result};

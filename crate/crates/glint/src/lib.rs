//! Inverse rendering engine: reconstructs an implicit surface, factored
//! reflectance and spherical-Gaussian illumination from posed RGB images.
//!
//! The pipeline runs in three stages:
//!   1. geometry + view-dependent radiance (volume rendering of an SDF),
//!   2. distillation of visibility and indirect light into compact fields,
//!   3. material decomposition under a spherical-Gaussian environment.
//!
//! Everything is CPU-only and deterministic for a fixed seed.

pub mod vec3;
pub mod err;
pub mod rng;
pub mod sg;
pub mod autodiff;
pub mod nets;
pub mod optim;
pub mod ckpt;
pub mod scene;
pub mod tracer;
pub mod render;
pub mod distill;
pub mod materials;
pub mod mesh;
pub mod metrics;
pub mod imageio;
pub mod svgplot;
pub mod config;
pub mod pipeline;

#[cfg(test)]
pub(crate) mod testutil;

pub use err::{Error, Result};

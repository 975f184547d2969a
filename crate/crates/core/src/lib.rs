//! Relightable Gaussian splatting for scenes lit by emissive backgrounds.
//!
//! Each primitive carries, besides the usual 3DGS parameters, a lighting
//! intensity, a texture coordinate and a mip level into the background image
//! that illuminates the scene. Rendering with a new background re-lights the
//! scene without retraining.

mod error;

pub mod backplate;
pub mod camera;
pub mod dataset;
pub mod image;
pub mod math;
pub mod metrics;
pub mod mip;
pub mod raster;
pub mod scene;
pub mod service;
pub mod sh;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

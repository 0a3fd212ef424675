//! Panoramic depth estimation on equirectangular images: tangent-patch
//! token geometry, panorama self-attention with learnable token flow, the
//! U-shaped transformer, its training objective and panorama-aware metrics.

pub mod attention;
pub mod checkpoint;
pub mod checks;
pub mod depth;
pub mod error;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scene;
pub mod tensor;
pub mod train;

pub use depth::DepthMap;
pub use error::{Error, Result};

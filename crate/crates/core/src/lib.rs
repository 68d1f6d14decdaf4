//! Low-light multi-view restoration and reconstruction.
//!
//! Images are decoupled into gain-corrected reflectance and an illumination
//! state ([`retinex`]), denoised by a U-Net with illumination-gated
//! frequency-band attention ([`isfga`]), corrected per scene by a pointwise
//! head ([`head`]) and finally fused into a gaussian splatting scene
//! ([`gsplat`]).

pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod enhance;
mod error;
pub mod graph;
pub mod gsplat;
pub mod head;
pub mod image;
pub mod isfga;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod retinex;
pub mod tensor;

pub use camera::{Camera, CameraRecord};
pub use checkpoint::Checkpoint;
pub use config::{PipelineConfig, Setting, Toggles};
pub use error::{Error, Result};
pub use image::RgbImage;
pub use tensor::Tensor;

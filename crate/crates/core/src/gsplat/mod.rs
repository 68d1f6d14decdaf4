//! Explicit 3-D gaussian scenes, splatting renderer and optimizer.

mod gaussian;
pub mod optimize;
pub mod project;
pub mod render;

pub use gaussian::{init_scene, logit, Gaussian3D, GaussianScene, InitMode, INIT_OPACITY, PARAMS_PER_GAUSSIAN};
pub use optimize::{optimize, OptimizeConfig, OptimizeReport};
pub use project::{project, Projected, BLUR_FLOOR, NEAR_PLANE};
pub use render::{render, render_backward, RenderOutput, SceneGradient, ALPHA_MIN};

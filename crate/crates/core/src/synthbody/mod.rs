//! Capsule bodies, scene sampling and rasterization.

pub mod body;
pub mod raster;
pub mod scene;

pub use body::{pose_body, CapsulePose, CapsuleShape, PosedBody};
pub use raster::{rasterize, render_features, MaskSet};
pub use scene::{sample_pose, sample_scene, sample_shape, Occluder, Scene, SceneConfig};

//! Occlusion-aware bottom-up multi-person 3D pose estimation.
//!
//! The crate covers the whole pipeline at desk scale: a capsule-body scene
//! generator with exact ray-cast masks, per-joint occlusion labels, target
//! maps, a stacked-hourglass detector trained on visible joints only, an
//! encoder-distillation network that reasons about occluded joints, grouping
//! and lifting to 3D, and the evaluation metrics.

pub mod assembly;
pub mod camera;
pub mod detnet;
pub mod dsed;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod geom;
pub mod io;
pub mod nn;
pub mod occlabel;
pub mod pose;
pub mod skeleton;
pub mod synthbody;
pub mod targets;

pub use camera::Camera;
pub use error::{Error, Result};
pub use geom::Vec3;
pub use pose::{Pose2D, Pose3D};
pub use skeleton::SkeletonSpec;

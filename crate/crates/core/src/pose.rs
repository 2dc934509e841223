use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::skeleton::{EDGES, NUM_EDGES, NUM_JOINTS, PELVIS};

/// 15 joints in camera coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub person_id: u32,
    pub joints: [Vec3; NUM_JOINTS],
}

impl Pose3D {
    pub fn new(person_id: u32, joints: [Vec3; NUM_JOINTS]) -> Self {
        Self { person_id, joints }
    }

    pub fn root(&self) -> Vec3 {
        self.joints[PELVIS]
    }

    pub fn bone_lengths(&self) -> [f64; NUM_EDGES] {
        std::array::from_fn(|e| {
            let (p, c) = EDGES[e];
            self.joints[p].dist(self.joints[c])
        })
    }

    pub fn translated(&self, offset: Vec3) -> Self {
        Self {
            person_id: self.person_id,
            joints: self.joints.map(|j| j + offset),
        }
    }

    /// Joints relative to the pelvis.
    pub fn root_relative(&self) -> Self {
        self.translated(-self.root())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(j) = self.joints.iter().position(|j| !j.is_finite() || !(j.z > 0.0)) {
            return Err(Error::Validation(format!("joint {j} is not in front of the camera")));
        }
        if let Some(e) = self.bone_lengths().iter().position(|&l| !(l > 0.0)) {
            return Err(Error::Validation(format!("bone {e} has zero length")));
        }
        Ok(())
    }

    /// Image projection of every joint. Joints behind the camera map to NaN.
    pub fn project(&self, camera: &Camera) -> [(f64, f64); NUM_JOINTS] {
        self.joints.map(|j| camera.project(j).unwrap_or((f64::NAN, f64::NAN)))
    }
}

/// Detected 2D joints in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub joints: [(f64, f64); NUM_JOINTS],
    pub confidences: [f64; NUM_JOINTS],
    pub depths: Option<[f64; NUM_JOINTS]>,
}

impl Pose2D {
    pub fn validate(&self) -> Result<()> {
        if self.confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Validation("confidences must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

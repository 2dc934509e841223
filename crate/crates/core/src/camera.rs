use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Ratio between image pixels and heatmap cells.
pub const STRIDE: usize = 4;

/// Pinhole camera with square pixels. Scenes live directly in its frame:
/// X right, Y down, Z forward, millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Image width in pixels (a multiple of [`STRIDE`]).
    pub width: usize,
    /// Image height in pixels (a multiple of [`STRIDE`]).
    pub height: usize,
}

impl Camera {
    pub fn new(focal: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            focal,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with the principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    /// Same view at `k` times the pixel resolution; pixel `u` maps to `k·u`.
    pub fn scaled(&self, k: usize) -> Result<Self> {
        let f = k as f64;
        Self::new(self.focal * f, self.cx * f, self.cy * f, self.width * k, self.height * k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::Validation(format!("focal must be positive, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image size must be positive".into()));
        }
        if self.width % STRIDE != 0 || self.height % STRIDE != 0 {
            return Err(Error::Validation(format!(
                "image size {}x{} is not divisible by the heatmap stride {STRIDE}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Heatmap grid as (w, h).
    pub fn heatmap_size(&self) -> (usize, usize) {
        (self.width / STRIDE, self.height / STRIDE)
    }

    pub fn project(&self, p: Vec3) -> Result<(f64, f64)> {
        if !(p.z > 0.0) {
            return Err(Error::Domain(format!("cannot project point with Z = {}", p.z)));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: Vec3) -> (f64, f64) {
        (self.focal * p.x / p.z + self.cx, self.focal * p.y / p.z + self.cy)
    }

    pub fn backproject(&self, pixel: (f64, f64), depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::Domain(format!("cannot backproject at depth {depth}")));
        }
        Ok(Vec3::new(
            (pixel.0 - self.cx) * depth / self.focal,
            (pixel.1 - self.cy) * depth / self.focal,
            depth,
        ))
    }

    /// Ray direction through an image point, scaled so that the ray parameter equals Z.
    #[inline]
    pub fn ray_dir(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.focal, (v - self.cy) / self.focal, 1.0)
    }

    pub fn in_image(&self, (u, v): (f64, f64)) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Normalised depth stored in root-depth maps: `Z * w / focal`.
    pub fn encode_depth(&self, z: f64) -> f64 {
        z * self.heatmap_size().0 as f64 / self.focal
    }

    /// Inverse of [`Camera::encode_depth`].
    pub fn decode_depth(&self, z_norm: f64) -> f64 {
        z_norm * self.focal / self.heatmap_size().0 as f64
    }
}

/// Image pixel coordinate to heatmap cell coordinate (cell centres at integers).
#[inline]
pub fn image_to_heatmap(u: f64) -> f64 {
    u / STRIDE as f64 - 0.5
}

#[inline]
pub fn heatmap_to_image(x: f64) -> f64 {
    (x + 0.5) * STRIDE as f64
}

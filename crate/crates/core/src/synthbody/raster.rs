//! Per-pixel ray casting of scenes into instance/part/depth maps.

use ndarray::{Array2, Array3};

use super::body::{PosedBody, HEAD_PART, NUM_PARTS};
use super::scene::{Occluder, Scene};
use crate::camera::Camera;
use crate::geom::{ray_aabb, ray_capsule, ray_sphere, Ray, Vec3};

pub const PART_NONE: u8 = u8::MAX;
pub const NUM_FEATURE_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    Sphere { center: Vec3, radius: f64 },
    Box { min: Vec3, max: Vec3 },
}

impl Shape {
    #[inline]
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        match *self {
            Shape::Capsule { a, b, radius } => ray_capsule(ray, a, b, radius),
            Shape::Sphere { center, radius } => ray_sphere(ray, center, radius),
            Shape::Box { min, max } => ray_aabb(ray, min, max),
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Shape::Capsule { a, b, radius } => {
                let r = Vec3::new(radius, radius, radius);
                (
                    Vec3::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)) - r,
                    Vec3::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)) + r,
                )
            }
            Shape::Sphere { center, radius } => {
                let r = Vec3::new(radius, radius, radius);
                (center - r, center + r)
            }
            Shape::Box { min, max } => (min, max),
        }
    }

    /// Conservative pixel rectangle [x0, x1) x [y0, y1) that can see this shape.
    fn pixel_rect(&self, cam: &Camera) -> (usize, usize, usize, usize) {
        let full = (0, cam.width, 0, cam.height);
        let (lo, hi) = self.bounds();
        if lo.z <= 1e-6 {
            return full;
        }
        let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for i in 0..8 {
            let p = Vec3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            );
            let (u, v) = cam.project_unchecked(p);
            u0 = u0.min(u);
            v0 = v0.min(v);
            u1 = u1.max(u);
            v1 = v1.max(v);
        }
        let clamp = |x: f64, n: usize| (x.max(0.0).min(n as f64)) as usize;
        (
            clamp(u0.floor() - 1.0, cam.width),
            clamp(u1.ceil() + 1.0, cam.width),
            clamp(v0.floor() - 1.0, cam.height),
            clamp(v1.ceil() + 1.0, cam.height),
        )
    }
}

/// A shape tagged with its owner: person index + 1 (> 0) or -(occluder index + 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePrimitive {
    pub shape: Shape,
    pub owner: i32,
    pub part: u8,
}

pub fn body_primitives(body: &PosedBody, owner: i32) -> impl Iterator<Item = ScenePrimitive> + '_ {
    body.capsules
        .iter()
        .enumerate()
        .map(move |(e, c)| ScenePrimitive {
            shape: Shape::Capsule {
                a: c.a,
                b: c.b,
                radius: c.radius,
            },
            owner,
            part: e as u8,
        })
        .chain(std::iter::once(ScenePrimitive {
            shape: Shape::Sphere {
                center: body.head_center,
                radius: body.head_radius,
            },
            owner,
            part: HEAD_PART as u8,
        }))
}

/// Every primitive in the scene, people first.
pub fn scene_primitives(scene: &Scene) -> Vec<ScenePrimitive> {
    let mut prims: Vec<ScenePrimitive> = scene
        .people
        .iter()
        .enumerate()
        .flat_map(|(i, b)| body_primitives(b, i as i32 + 1))
        .collect();
    prims.extend(scene.occluders.iter().enumerate().map(|(k, o)| ScenePrimitive {
        shape: match *o {
            Occluder::Box { min, max } => Shape::Box { min, max },
            Occluder::Sphere { center, radius } => Shape::Sphere { center, radius },
        },
        owner: -(k as i32 + 1),
        part: PART_NONE,
    }));
    prims
}

/// Rasterized scene at image resolution, indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// 0 background, k > 0 person k (1-based), negative occluder ids.
    pub instance_map: Array2<i32>,
    /// Body part of the owning person, [`PART_NONE`] elsewhere.
    pub part_map: Array2<u8>,
    /// Z of the nearest surface (mm), +inf on background.
    pub depth_buffer: Array2<f64>,
}

impl MaskSet {
    pub fn height(&self) -> usize {
        self.instance_map.nrows()
    }

    pub fn width(&self) -> usize {
        self.instance_map.ncols()
    }

    /// Binary mask of one person (1-based instance id).
    pub fn person_mask(&self, instance: i32) -> Array2<bool> {
        self.instance_map.mapv(|v| v == instance)
    }

    /// True if any 8-neighbour of `(row, col)` (or the pixel itself) changes owner or part.
    pub fn near_boundary(&self, row: usize, col: usize, radius: usize) -> bool {
        let key = |r: usize, c: usize| (self.instance_map[[r, c]], self.part_map[[r, c]]);
        let k0 = key(row, col);
        let r0 = row.saturating_sub(radius);
        let c0 = col.saturating_sub(radius);
        let r1 = (row + radius).min(self.height() - 1);
        let c1 = (col + radius).min(self.width() - 1);
        (r0..=r1).any(|r| (c0..=c1).any(|c| key(r, c) != k0))
    }
}

/// Casts one ray per pixel centre and keeps the nearest surface.
pub fn rasterize(scene: &Scene) -> MaskSet {
    let cam = &scene.camera;
    let (w, h) = (cam.width, cam.height);
    let mut instance_map = Array2::<i32>::zeros((h, w));
    let mut part_map = Array2::<u8>::from_elem((h, w), PART_NONE);
    let mut depth_buffer = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    for prim in scene_primitives(scene) {
        let (x0, x1, y0, y1) = prim.shape.pixel_rect(cam);
        for row in y0..y1 {
            for col in x0..x1 {
                let ray = Ray::new(Vec3::ZERO, cam.ray_dir(col as f64 + 0.5, row as f64 + 0.5));
                if let Some(t) = prim.shape.intersect(&ray) {
                    if t < depth_buffer[[row, col]] {
                        depth_buffer[[row, col]] = t;
                        instance_map[[row, col]] = prim.owner;
                        part_map[[row, col]] = if prim.owner > 0 { prim.part } else { PART_NONE };
                    }
                }
            }
        }
    }
    MaskSet {
        instance_map,
        part_map,
        depth_buffer,
    }
}

/// Detector input: `[channel, row, col]` with channels
/// 0 min-max normalised depth over person pixels,
/// 1 owner indicator (1 person, 0.5 occluder, 0 background),
/// 2 body part `(part + 1) / 15` on person pixels,
/// 3 owner boundaries (4-neighbourhood).
pub fn render_features(masks: &MaskSet) -> Array3<f32> {
    let (h, w) = (masks.height(), masks.width());
    let mut out = Array3::<f32>::zeros((NUM_FEATURE_CHANNELS, h, w));
    let person_depths = masks
        .instance_map
        .iter()
        .zip(masks.depth_buffer.iter())
        .filter(|(&i, _)| i > 0)
        .map(|(_, &d)| d);
    let (lo, hi) = person_depths.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let range = hi - lo;
    for row in 0..h {
        for col in 0..w {
            let inst = masks.instance_map[[row, col]];
            if inst > 0 {
                out[[0, row, col]] = if range > 0.0 {
                    ((masks.depth_buffer[[row, col]] - lo) / range) as f32
                } else {
                    0.0
                };
                out[[1, row, col]] = 1.0;
                out[[2, row, col]] = (masks.part_map[[row, col]] as f32 + 1.0) / NUM_PARTS as f32;
            } else if inst < 0 {
                out[[1, row, col]] = 0.5;
            }
            let differs = |r: usize, c: usize| masks.instance_map[[r, c]] != inst;
            let edge = (row > 0 && differs(row - 1, col))
                || (row + 1 < h && differs(row + 1, col))
                || (col > 0 && differs(row, col - 1))
                || (col + 1 < w && differs(row, col + 1));
            if edge {
                out[[3, row, col]] = 1.0;
            }
        }
    }
    out
}

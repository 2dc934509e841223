//! Small 3-vector type and analytic ray/primitive intersections.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm2().sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self / self.norm()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A ray `origin + t * dir`. `dir` need not be unit length.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, dir: Vec3) -> Self {
        Self { origin, dir }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Entry parameter of the ray into a sphere, if it enters in front of the origin.
pub fn ray_sphere(ray: &Ray, center: Vec3, radius: f64) -> Option<f64> {
    let oc = ray.origin - center;
    let a = ray.dir.norm2();
    let b = ray.dir.dot(oc);
    let c = oc.norm2() - radius * radius;
    let h = b * b - a * c;
    if h < 0.0 {
        return None;
    }
    let t = (-b - h.sqrt()) / a;
    (t > 0.0).then_some(t)
}

/// Entry parameter into the open cylinder between `a` and `b` (no caps).
fn ray_cylinder_body(ray: &Ray, a: Vec3, b: Vec3, radius: f64) -> Option<f64> {
    let ba = b - a;
    let oa = ray.origin - a;
    let baba = ba.norm2();
    let bard = ba.dot(ray.dir);
    let baoa = ba.dot(oa);
    let rdoa = ray.dir.dot(oa);
    let oaoa = oa.norm2();
    let dd = ray.dir.norm2();
    let qa = baba * dd - bard * bard;
    if qa <= 1e-12 * baba * dd {
        return None;
    }
    let qb = baba * rdoa - baoa * bard;
    let qc = baba * oaoa - baoa * baoa - radius * radius * baba;
    let h = qb * qb - qa * qc;
    if h < 0.0 {
        return None;
    }
    let t = (-qb - h.sqrt()) / qa;
    let y = baoa + t * bard;
    (t > 0.0 && y > 0.0 && y < baba).then_some(t)
}

/// Entry parameter into a capsule (segment `a`-`b` swept by `radius`).
///
/// The capsule is the union of a cylinder and two end spheres, so its first
/// hit is the nearest first hit among the three pieces.
pub fn ray_capsule(ray: &Ray, a: Vec3, b: Vec3, radius: f64) -> Option<f64> {
    [
        ray_cylinder_body(ray, a, b, radius),
        ray_sphere(ray, a, radius),
        ray_sphere(ray, b, radius),
    ]
    .into_iter()
    .flatten()
    .reduce(f64::min)
}

/// Entry parameter into an axis-aligned box.
pub fn ray_aabb(ray: &Ray, min: Vec3, max: Vec3) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let o = ray.origin.to_array()[axis];
        let d = ray.dir.to_array()[axis];
        let lo = min.to_array()[axis];
        let hi = max.to_array()[axis];
        if d.abs() < 1e-300 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - o) / d, (hi - o) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Closest approach between the ray (t >= 0) and segment `a`-`b`.
/// Returns (distance, ray parameter, segment parameter in [0, 1]).
pub fn ray_segment_distance(ray: &Ray, a: Vec3, b: Vec3) -> (f64, f64, f64) {
    let d1 = b - a;
    let d2 = ray.dir;
    let r = a - ray.origin;
    let aa = d1.norm2();
    let ee = d2.norm2();
    let f = d2.dot(r);
    let c = d1.dot(r);
    let bb = d1.dot(d2);
    let denom = aa * ee - bb * bb;
    let mut s = if aa > 0.0 && denom > 1e-12 * aa * ee {
        ((bb * f - c * ee) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (bb * s + f) / ee;
    if t < 0.0 {
        t = 0.0;
        s = if aa > 0.0 { (-c / aa).clamp(0.0, 1.0) } else { 0.0 };
    }
    let dist = ray.at(t).dist(a + d1 * s);
    (dist, t, s)
}


/// Row-major 3x3 rotation/linear map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn mul(&self, o: &Mat3) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(m)
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let a = v.to_array();
        Vec3::from_array(std::array::from_fn(|i| {
            self.0[i][0] * a[0] + self.0[i][1] * a[1] + self.0[i][2] * a[2]
        }))
    }

    pub fn transpose(&self) -> Mat3 {
        Mat3(std::array::from_fn(|i| std::array::from_fn(|j| self.0[j][i])))
    }

    /// Rotation by the axis-angle vector `w` (angle = |w|).
    pub fn from_axis_angle(w: Vec3) -> Mat3 {
        let theta = w.norm();
        if theta < 1e-15 {
            return Mat3::IDENTITY;
        }
        let k = w / theta;
        let (s, c) = theta.sin_cos();
        let t = 1.0 - c;
        Mat3([
            [c + k.x * k.x * t, k.x * k.y * t - k.z * s, k.x * k.z * t + k.y * s],
            [k.y * k.x * t + k.z * s, c + k.y * k.y * t, k.y * k.z * t - k.x * s],
            [k.z * k.x * t - k.y * s, k.z * k.y * t + k.x * s, c + k.z * k.z * t],
        ])
    }

    /// Axis-angle vector of a rotation matrix, angle in [0, pi].
    pub fn to_axis_angle(&self) -> Vec3 {
        let m = &self.0;
        let cos = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
        let angle = cos.acos();
        if angle < 1e-12 {
            return Vec3::ZERO;
        }
        let axis = Vec3::new(m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]);
        if angle < std::f64::consts::PI - 1e-6 {
            return axis.normalized() * angle;
        }
        // near pi: axis from the symmetric part
        let xx = ((m[0][0] + 1.0) / 2.0).max(0.0).sqrt();
        let yy = ((m[1][1] + 1.0) / 2.0).max(0.0).sqrt();
        let zz = ((m[2][2] + 1.0) / 2.0).max(0.0).sqrt();
        let k = if xx >= yy && xx >= zz {
            Vec3::new(xx, m[0][1] / (2.0 * xx), m[0][2] / (2.0 * xx))
        } else if yy >= zz {
            Vec3::new(m[0][1] / (2.0 * yy), yy, m[1][2] / (2.0 * yy))
        } else {
            Vec3::new(m[0][2] / (2.0 * zz), m[1][2] / (2.0 * zz), zz)
        };
        k.normalized() * angle
    }

    /// Smallest rotation taking unit vector `from` onto unit vector `to`.
    pub fn swing(from: Vec3, to: Vec3) -> Vec3 {
        let axis = from.cross(to);
        let s = axis.norm();
        let c = from.dot(to);
        if s < 1e-12 {
            if c > 0.0 {
                return Vec3::ZERO;
            }
            // antiparallel: any perpendicular axis
            let helper = if from.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
            return from.cross(helper).normalized() * std::f64::consts::PI;
        }
        axis / s * s.atan2(c)
    }
}

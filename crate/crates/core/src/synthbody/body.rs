//! Capsule body: shape/pose parameters, forward kinematics and posed primitives.

use num_dual::DualNum;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::geom::{Mat3, Vec3};
use crate::pose::Pose3D;
use crate::skeleton::{edge_into, EDGES, HEAD, NUM_EDGES, NUM_JOINTS, PELVIS};

pub const NUM_BETA: usize = 10;
pub const NUM_PARTS: usize = NUM_EDGES + 1;
/// Part index of the head sphere; parts `0..NUM_EDGES` are the edge capsules.
pub const HEAD_PART: usize = NUM_EDGES;

pub const BETA_HEAD: usize = 0;
pub const BETA_NECK: usize = 1;
pub const BETA_TORSO: usize = 2;
pub const BETA_UPPER_ARM: usize = 3;
pub const BETA_FOREARM: usize = 4;
pub const BETA_THIGH: usize = 5;
pub const BETA_SHIN: usize = 6;
pub const BETA_SCALE: usize = 7;
pub const BETA_SHOULDER_WIDTH: usize = 8;
pub const BETA_HIP_WIDTH: usize = 9;

pub const RADIUS_BOUNDS: (f64, f64) = (20.0, 200.0);
pub const SCALE_BOUNDS: (f64, f64) = (0.7, 1.3);

/// Default body: radii in mm, then three unit scales.
pub const TEMPLATE_BETA: [f64; NUM_BETA] = [100.0, 55.0, 130.0, 48.0, 40.0, 70.0, 52.0, 1.0, 1.0, 1.0];

/// Rest-pose bone vectors (T-pose, facing the camera, person's left = +X).
pub const TEMPLATE_OFFSETS: [[f64; 3]; NUM_EDGES] = [
    [0.0, -520.0, 0.0],
    [0.0, -220.0, 0.0],
    [170.0, 0.0, 0.0],
    [290.0, 0.0, 0.0],
    [260.0, 0.0, 0.0],
    [-170.0, 0.0, 0.0],
    [-290.0, 0.0, 0.0],
    [-260.0, 0.0, 0.0],
    [100.0, 0.0, 0.0],
    [0.0, 430.0, 0.0],
    [0.0, 410.0, 0.0],
    [-100.0, 0.0, 0.0],
    [0.0, 430.0, 0.0],
    [0.0, 410.0, 0.0],
];

/// Which beta entry gives the radius of each edge capsule.
pub const EDGE_RADIUS_BETA: [usize; NUM_EDGES] = [
    BETA_TORSO,
    BETA_NECK,
    BETA_UPPER_ARM,
    BETA_UPPER_ARM,
    BETA_FOREARM,
    BETA_UPPER_ARM,
    BETA_UPPER_ARM,
    BETA_FOREARM,
    BETA_THIGH,
    BETA_THIGH,
    BETA_SHIN,
    BETA_THIGH,
    BETA_THIGH,
    BETA_SHIN,
];

/// Extra width scale applied to an edge's offset, if any.
fn width_beta(edge: usize) -> Option<usize> {
    match edge {
        2 | 5 => Some(BETA_SHOULDER_WIDTH),
        8 | 11 => Some(BETA_HIP_WIDTH),
        _ => None,
    }
}

/// Ten shape parameters: seven radii (mm) and three scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapsuleShape {
    pub beta: [f64; NUM_BETA],
}

impl Default for CapsuleShape {
    fn default() -> Self {
        Self { beta: TEMPLATE_BETA }
    }
}

impl CapsuleShape {
    pub fn new(beta: [f64; NUM_BETA]) -> Result<Self> {
        let s = Self { beta };
        s.validate()?;
        Ok(s)
    }

    pub fn bounds(i: usize) -> (f64, f64) {
        if i < BETA_SCALE {
            RADIUS_BOUNDS
        } else {
            SCALE_BOUNDS
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &b) in self.beta.iter().enumerate() {
            let (lo, hi) = Self::bounds(i);
            if !(lo..=hi).contains(&b) {
                return Err(validation!("beta[{i}] = {b} outside [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    /// Projects every entry into its bounds.
    pub fn clamped(mut self) -> Self {
        for (i, b) in self.beta.iter_mut().enumerate() {
            let (lo, hi) = Self::bounds(i);
            *b = b.clamp(lo, hi);
        }
        self
    }

    pub fn scale(&self) -> f64 {
        self.beta[BETA_SCALE]
    }

    pub fn edge_radius(&self, edge: usize) -> f64 {
        self.beta[EDGE_RADIUS_BETA[edge]]
    }

    /// Bone lengths this shape produces.
    pub fn bone_lengths(&self) -> [f64; NUM_EDGES] {
        std::array::from_fn(|e| bone_offset(&self.beta, e).map(|v| v * v).iter().sum::<f64>().sqrt())
    }
}

/// Per-edge axis-angle rotations applied down the kinematic tree, plus the pelvis position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapsulePose {
    pub theta: [[f64; 3]; NUM_EDGES],
    pub translation: Vec3,
}

impl CapsulePose {
    pub fn identity(translation: Vec3) -> Self {
        Self {
            theta: [[0.0; 3]; NUM_EDGES],
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (e, w) in self.theta.iter().enumerate() {
            let n = Vec3::from_array(*w).norm();
            if !n.is_finite() || n > std::f64::consts::PI + 1e-9 {
                return Err(validation!("theta[{e}] has magnitude {n} > pi"));
            }
        }
        if !self.translation.is_finite() {
            return Err(validation!("non-finite root translation"));
        }
        Ok(())
    }

    /// Left/right mirror through the camera's YZ plane.
    pub fn mirrored(&self) -> Self {
        let theta = std::array::from_fn(|e| {
            let w = self.theta[crate::skeleton::mirror_edge(e)];
            [w[0], -w[1], -w[2]]
        });
        Self {
            theta,
            translation: Vec3::new(-self.translation.x, self.translation.y, self.translation.z),
        }
    }

    /// Flat parameter vector: 42 rotation values then 3 translation values.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.theta.iter().flatten().copied().collect();
        v.extend(self.translation.to_array());
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            theta: std::array::from_fn(|e| [v[3 * e], v[3 * e + 1], v[3 * e + 2]]),
            translation: Vec3::new(v[42], v[43], v[44]),
        }
    }
}

pub const NUM_POSE_PARAMS: usize = NUM_EDGES * 3 + 3;

fn bone_offset<T: DualNum<f64> + Copy>(beta: &[T; NUM_BETA], edge: usize) -> [T; 3] {
    let mut s = beta[BETA_SCALE];
    if let Some(w) = width_beta(edge) {
        s *= beta[w];
    }
    TEMPLATE_OFFSETS[edge].map(|o| s * o)
}

type M3<T> = [[T; 3]; 3];

fn rodrigues<T: DualNum<f64> + Copy>(w: [T; 3]) -> M3<T> {
    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = if t2.re() < 1e-10 {
        (T::one() - t2 / 6.0, T::from(0.5) - t2 / 24.0)
    } else {
        let t = t2.sqrt();
        let (s, c) = t.sin_cos();
        (s / t, (T::one() - c) / t2)
    };
    let k = [[T::zero(), -w[2], w[1]], [w[2], T::zero(), -w[0]], [-w[1], w[0], T::zero()]];
    let mut r = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k2: T = (0..3).map(|m| k[i][m] * k[m][j]).sum();
            r[i][j] = a * k[i][j] + b * k2;
        }
        r[i][i] += T::one();
    }
    r
}

fn matmul<T: DualNum<f64> + Copy>(a: &M3<T>, b: &M3<T>) -> M3<T> {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j]))
}

fn matvec<T: DualNum<f64> + Copy>(a: &M3<T>, v: &[T; 3]) -> [T; 3] {
    std::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// Joint positions from shape and pose, generic so dual numbers can flow through.
pub fn forward_kinematics<T: DualNum<f64> + Copy>(
    beta: &[T; NUM_BETA],
    theta: &[[T; 3]; NUM_EDGES],
    translation: [T; 3],
) -> [[T; 3]; NUM_JOINTS] {
    let mut joints = [[T::zero(); 3]; NUM_JOINTS];
    let mut frames: [Option<M3<T>>; NUM_EDGES] = [None; NUM_EDGES];
    joints[PELVIS] = translation;
    for (e, &(p, c)) in EDGES.iter().enumerate() {
        let local = rodrigues(theta[e]);
        let global = match edge_into(p) {
            Some(pe) => matmul(frames[pe].as_ref().expect("parents precede children"), &local),
            None => local,
        };
        let bone = matvec(&global, &bone_offset(beta, e));
        joints[c] = std::array::from_fn(|k| joints[p][k] + bone[k]);
        frames[e] = Some(global);
    }
    joints
}

/// Global frame of every edge for a pose (f64 only; used by inverse kinematics).
pub fn edge_frames(theta: &[[f64; 3]; NUM_EDGES]) -> [Mat3; NUM_EDGES] {
    let mut frames = [Mat3::IDENTITY; NUM_EDGES];
    for (e, &(p, _)) in EDGES.iter().enumerate() {
        let local = Mat3::from_axis_angle(Vec3::from_array(theta[e]));
        frames[e] = match edge_into(p) {
            Some(pe) => frames[pe].mul(&local),
            None => local,
        };
    }
    frames
}

pub fn template_direction(edge: usize) -> Vec3 {
    Vec3::from_array(TEMPLATE_OFFSETS[edge]).normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

/// A posed capsule body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosedBody {
    pub person_id: u32,
    pub shape: CapsuleShape,
    pub params: CapsulePose,
    /// One capsule per skeleton edge, in edge order.
    pub capsules: [Capsule; NUM_EDGES],
    pub head_center: Vec3,
    pub head_radius: f64,
    pub pose: Pose3D,
}

impl PosedBody {
    /// Radius of a body part (edge capsule or head sphere).
    pub fn part_radius(&self, part: usize) -> f64 {
        if part == HEAD_PART {
            self.head_radius
        } else {
            self.capsules[part].radius
        }
    }

    /// Whether `p` lies inside (or on) the solid of a body part.
    pub fn part_contains(&self, part: usize, p: Vec3) -> bool {
        if part == HEAD_PART {
            return p.dist(self.head_center) <= self.head_radius;
        }
        let c = &self.capsules[part];
        let ab = c.b - c.a;
        let len2 = ab.norm2();
        let s = if len2 > 0.0 { ((p - c.a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        p.dist(c.a + ab * s) <= c.radius
    }

    /// Parts a joint belongs to: its incident parts plus any part enclosing it.
    pub fn own_part(&self, joint: usize, part: usize) -> bool {
        incident_parts(joint).any(|q| q == part) || (part < NUM_PARTS && self.part_contains(part, self.pose.joints[joint]))
    }
}

/// Parts touching a joint: capsules of incident edges, plus the head sphere for the head.
pub fn incident_parts(joint: usize) -> impl Iterator<Item = usize> {
    EDGES
        .iter()
        .enumerate()
        .filter(move |(_, &(p, c))| p == joint || c == joint)
        .map(|(e, _)| e)
        .chain((joint == HEAD).then_some(HEAD_PART))
}

/// Radius used for a joint's front surface: the widest part touching it.
pub fn joint_radius(body: &PosedBody, joint: usize) -> f64 {
    incident_parts(joint).map(|p| body.part_radius(p)).fold(0.0, f64::max)
}

pub fn pose_body(shape: &CapsuleShape, params: &CapsulePose, person_id: u32) -> Result<PosedBody> {
    shape.validate()?;
    params.validate()?;
    let joints = forward_kinematics(&shape.beta, &params.theta, params.translation.to_array());
    let joints = joints.map(Vec3::from_array);
    let capsules = std::array::from_fn(|e| {
        let (p, c) = EDGES[e];
        Capsule {
            a: joints[p],
            b: joints[c],
            radius: shape.edge_radius(e),
        }
    });
    Ok(PosedBody {
        person_id,
        shape: *shape,
        params: *params,
        capsules,
        head_center: joints[HEAD],
        head_radius: shape.beta[BETA_HEAD],
        pose: Pose3D::new(person_id, joints),
    })
}

//! Skeleton-guided shape fitting: closed-form shape initialisation, inverse
//! kinematics, the four-term fitting objective and its test-time optimiser.

use nalgebra::SVector;
use ndarray::{Array2, ArrayView2};
use num_dual::{jacobian, DualSVec64};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{validation, Error, Result};
use crate::geom::{ray_segment_distance, Mat3, Ray, Vec3};
use crate::pose::Pose3D;
use crate::skeleton::{edge_into, EDGES, L_HIP, L_SHOULDER, NECK, NUM_EDGES, NUM_JOINTS, PELVIS, R_HIP, R_SHOULDER};
use crate::synthbody::body::{
    forward_kinematics, template_direction, CapsulePose, CapsuleShape, BETA_HEAD, BETA_HIP_WIDTH,
    BETA_SCALE, BETA_SHOULDER_WIDTH, EDGE_RADIUS_BETA, HEAD_PART, NUM_BETA, NUM_PARTS, NUM_POSE_PARAMS,
    TEMPLATE_BETA, TEMPLATE_OFFSETS,
};

const NUM_PARAMS: usize = NUM_BETA + NUM_POSE_PARAMS;
const NUM_THETA: usize = NUM_EDGES * 3;

/// Width (px) of the sigmoid edge of the soft silhouette.
pub const SILHOUETTE_SOFTNESS_PX: f64 = 0.5;
/// Pixels farther than this from every part are treated as exactly outside.
const SILHOUETTE_CULL_PX: f64 = 16.0;

/// Closed-form shape estimate from a skeleton.
pub fn shape_init(pose: &Pose3D) -> Result<CapsuleShape> {
    let j = &pose.joints;
    let torso = j[PELVIS].dist(j[NECK]);
    let template_torso = Vec3::from_array(TEMPLATE_OFFSETS[0]).norm();
    if !(torso > 1e-6) {
        return Err(validation!("degenerate torso of length {torso}"));
    }
    let scale = torso / template_torso;
    let shoulder = (j[L_SHOULDER].dist(j[NECK]) + j[R_SHOULDER].dist(j[NECK])) / 2.0;
    let hip = (j[L_HIP].dist(j[PELVIS]) + j[R_HIP].dist(j[PELVIS])) / 2.0;
    let mut beta = TEMPLATE_BETA;
    for b in beta.iter_mut().take(BETA_SCALE) {
        *b *= scale;
    }
    beta[BETA_SCALE] = scale;
    beta[BETA_SHOULDER_WIDTH] = shoulder / (TEMPLATE_OFFSETS[2][0] * scale);
    beta[BETA_HIP_WIDTH] = hip / (TEMPLATE_OFFSETS[8][0] * scale);
    Ok(CapsuleShape { beta }.clamped())
}

/// Closed-form inverse kinematics: per-edge swing rotations with zero twist.
pub fn skeleton_to_pose(pose: &Pose3D, _shape: &CapsuleShape) -> Result<CapsulePose> {
    let mut frames = [Mat3::IDENTITY; NUM_EDGES];
    let mut theta = [[0.0; 3]; NUM_EDGES];
    for (e, &(p, c)) in EDGES.iter().enumerate() {
        let bone = pose.joints[c] - pose.joints[p];
        let len = bone.norm();
        if !(len > 1e-9) {
            return Err(validation!("bone {e} ({p} -> {c}) has zero length"));
        }
        let parent = edge_into(p).map(|pe| frames[pe]).unwrap_or(Mat3::IDENTITY);
        let local_target = parent.transpose().apply(bone / len);
        let w = Mat3::swing(template_direction(e), local_target);
        theta[e] = w.to_array();
        frames[e] = parent.mul(&Mat3::from_axis_angle(w));
    }
    Ok(CapsulePose {
        theta,
        translation: pose.joints[PELVIS],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsfWeights {
    pub lambda_beta: f64,
    pub lambda_theta: f64,
    pub lambda_pos: f64,
    pub lambda_sil: f64,
}

impl Default for SsfWeights {
    fn default() -> Self {
        Self {
            lambda_beta: 1.0,
            lambda_theta: 1.0,
            lambda_pos: 1e-3,
            lambda_sil: 100.0,
        }
    }
}

impl SsfWeights {
    /// Only the weakly supervised terms (no ground-truth parameters).
    pub fn weak(self) -> Self {
        Self {
            lambda_beta: 0.0,
            lambda_theta: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_beta, self.lambda_theta, self.lambda_pos, self.lambda_sil];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(validation!("SSF weights must be finite and non-negative: {all:?}"));
        }
        Ok(())
    }
}

/// Objective value, unweighted terms and gradient w.r.t. (beta, pose parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct HsLoss {
    pub total: f64,
    pub beta: f64,
    pub theta: f64,
    pub pose: f64,
    pub silhouette: f64,
    pub grad_beta: [f64; NUM_BETA],
    pub grad_params: [f64; NUM_POSE_PARAMS],
}

fn params_vector(shape: &CapsuleShape, params: &CapsulePose) -> SVector<f64, NUM_PARAMS> {
    let mut x = SVector::<f64, NUM_PARAMS>::zeros();
    for (i, b) in shape.beta.iter().enumerate() {
        x[i] = *b;
    }
    for (i, v) in params.to_vec().into_iter().enumerate() {
        x[NUM_BETA + i] = v;
    }
    x
}

type Jac = nalgebra::SMatrix<f64, { NUM_JOINTS * 3 }, NUM_PARAMS>;

/// Joint positions and their Jacobian w.r.t. all 55 parameters.
fn joints_with_jacobian(x: SVector<f64, NUM_PARAMS>) -> ([Vec3; NUM_JOINTS], Jac) {
    let (f, jac) = jacobian(
        |v: SVector<DualSVec64<NUM_PARAMS>, NUM_PARAMS>| {
            let beta: [DualSVec64<NUM_PARAMS>; NUM_BETA] = std::array::from_fn(|i| v[i]);
            let theta = std::array::from_fn(|e| std::array::from_fn(|k| v[NUM_BETA + 3 * e + k]));
            let t = std::array::from_fn(|k| v[NUM_BETA + NUM_THETA + k]);
            let joints = forward_kinematics(&beta, &theta, t);
            SVector::<DualSVec64<NUM_PARAMS>, { NUM_JOINTS * 3 }>::from_fn(|r, _| joints[r / 3][r % 3])
        },
        x,
    );
    let joints = std::array::from_fn(|j| Vec3::new(f[3 * j], f[3 * j + 1], f[3 * j + 2]));
    (joints, jac)
}

fn part_segment(part: usize) -> (usize, usize) {
    if part == HEAD_PART {
        (crate::skeleton::HEAD, crate::skeleton::HEAD)
    } else {
        EDGES[part]
    }
}

fn part_radius_index(part: usize) -> usize {
    if part == HEAD_PART {
        BETA_HEAD
    } else {
        EDGE_RADIUS_BETA[part]
    }
}

/// Per-pixel signed distance (px) of the model silhouette and the owning part.
struct SilhouetteField {
    /// Pixels per mm at the reference depth.
    scale: f64,
    rect: (usize, usize, usize, usize),
}

impl SilhouetteField {
    fn new(joints: &[Vec3; NUM_JOINTS], beta: &[f64; NUM_BETA], camera: &Camera, ref_depth: f64) -> Self {
        let scale = camera.focal / ref_depth;
        let mut bb = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut unbounded = false;
        for part in 0..NUM_PARTS {
            let (a, b) = part_segment(part);
            let r = beta[part_radius_index(part)];
            for p in [joints[a], joints[b]] {
                if p.z - r <= 1.0 {
                    unbounded = true;
                    continue;
                }
                let (u, v) = camera.project_unchecked(p);
                let rp = camera.focal * r / (p.z - r);
                bb = (bb.0.min(u - rp), bb.1.min(v - rp), bb.2.max(u + rp), bb.3.max(v + rp));
            }
        }
        let m = SILHOUETTE_CULL_PX;
        let clamp = |x: f64, n: usize| x.max(0.0).min(n as f64) as usize;
        let rect = if unbounded {
            (0, camera.width, 0, camera.height)
        } else {
            (
                clamp((bb.0 - m).floor(), camera.width),
                clamp((bb.2 + m).ceil(), camera.width),
                clamp((bb.1 - m).floor(), camera.height),
                clamp((bb.3 + m).ceil(), camera.height),
            )
        };
        Self { scale, rect }
    }

    fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.rect.0 && col < self.rect.1 && row >= self.rect.2 && row < self.rect.3
    }

    /// (signed distance px, part, segment param, unit normal from axis to ray point)
    fn eval(&self, joints: &[Vec3; NUM_JOINTS], beta: &[f64; NUM_BETA], ray: &Ray) -> (f64, usize, f64, Vec3) {
        let mut best = (f64::INFINITY, 0, 0.0, Vec3::ZERO);
        for part in 0..NUM_PARTS {
            let (a, b) = part_segment(part);
            let (d, t, s) = ray_segment_distance(ray, joints[a], joints[b]);
            let sd = (d - beta[part_radius_index(part)]) * self.scale;
            if sd < best.0 {
                let q = joints[a] + (joints[b] - joints[a]) * s;
                let n = if d > 0.0 { (ray.at(t) - q) / d } else { Vec3::ZERO };
                best = (sd, part, s, n);
            }
        }
        best
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Soft silhouette of the model in [0, 1] per pixel (`[row, col]`).
pub fn render_soft_silhouette(shape: &CapsuleShape, params: &CapsulePose, camera: &Camera, ref_depth: f64) -> Array2<f64> {
    let joints = forward_kinematics(&shape.beta, &params.theta, params.translation.to_array()).map(Vec3::from_array);
    let field = SilhouetteField::new(&joints, &shape.beta, camera, ref_depth);
    Array2::from_shape_fn((camera.height, camera.width), |(row, col)| {
        if !field.contains(row, col) {
            return 0.0;
        }
        let ray = Ray::new(Vec3::ZERO, camera.ray_dir(col as f64 + 0.5, row as f64 + 0.5));
        sigmoid(-field.eval(&joints, &shape.beta, &ray).0 / SILHOUETTE_SOFTNESS_PX)
    })
}

/// Exact model silhouette: pixels whose centre ray hits a capsule.
pub fn render_hard_silhouette(shape: &CapsuleShape, params: &CapsulePose, camera: &Camera) -> Array2<bool> {
    let joints = forward_kinematics(&shape.beta, &params.theta, params.translation.to_array()).map(Vec3::from_array);
    let field = SilhouetteField::new(&joints, &shape.beta, camera, joints[PELVIS].z.max(1.0));
    Array2::from_shape_fn((camera.height, camera.width), |(row, col)| {
        field.contains(row, col) && {
            let ray = Ray::new(Vec3::ZERO, camera.ray_dir(col as f64 + 0.5, row as f64 + 0.5));
            field.eval(&joints, &shape.beta, &ray).0 <= 0.0
        }
    })
}

pub fn mask_iou(a: &Array2<bool>, b: ArrayView2<f64>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let y = y > 0.5;
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fitting objective with its gradient.
///
/// `person_mask` is indexed `[row, col]` with values in [0, 1]. The supervised
/// terms are evaluated only when the matching ground truth is supplied.
#[allow(clippy::too_many_arguments)]
pub fn loss_hs(
    shape: &CapsuleShape,
    params: &CapsulePose,
    gt_shape: Option<&CapsuleShape>,
    gt_params: Option<&CapsulePose>,
    target_pose: &Pose3D,
    person_mask: ArrayView2<f64>,
    camera: &Camera,
    weights: &SsfWeights,
) -> Result<HsLoss> {
    weights.validate()?;
    if person_mask.dim() != (camera.height, camera.width) {
        return Err(validation!("person mask shape {:?} does not match the camera", person_mask.dim()));
    }
    let x = params_vector(shape, params);
    let (joints, jac) = joints_with_jacobian(x);
    let mut grad_joints = [Vec3::ZERO; NUM_JOINTS];
    let mut grad = [0.0; NUM_PARAMS];

    // pose term
    let mut pose_term = 0.0;
    for j in 0..NUM_JOINTS {
        let d = joints[j] - target_pose.joints[j];
        pose_term += d.norm2();
        grad_joints[j] += d * (2.0 * weights.lambda_pos);
    }

    // silhouette term
    let mut sil_term = 0.0;
    {
        let ref_depth = target_pose.root().z.max(1.0);
        let field = SilhouetteField::new(&joints, &shape.beta, camera, ref_depth);
        let n = (camera.width * camera.height) as f64;
        let coef = 2.0 * weights.lambda_sil / n;
        for ((row, col), &m) in person_mask.indexed_iter() {
            if !field.contains(row, col) {
                sil_term += m * m;
                continue;
            }
            let ray = Ray::new(Vec3::ZERO, camera.ray_dir(col as f64 + 0.5, row as f64 + 0.5));
            let (sd, part, s, normal) = field.eval(&joints, &shape.beta, &ray);
            let soft = sigmoid(-sd / SILHOUETTE_SOFTNESS_PX);
            let e = soft - m;
            sil_term += e * e;
            if coef == 0.0 {
                continue;
            }
            // d soft / d sd
            let dsoft = -soft * (1.0 - soft) / SILHOUETTE_SOFTNESS_PX;
            let g = coef * e * dsoft * field.scale;
            let (a, b) = part_segment(part);
            // d(distance)/d(endpoint) = -(weight) * normal
            grad_joints[a] += normal * (-g * (1.0 - s));
            grad_joints[b] += normal * (-g * s);
            grad[part_radius_index(part)] -= g;
        }
        sil_term /= n;
    }

    // chain joint gradients through the kinematics Jacobian
    for j in 0..NUM_JOINTS {
        let gj = grad_joints[j].to_array();
        for (k, gk) in gj.iter().enumerate() {
            if *gk == 0.0 {
                continue;
            }
            let row = jac.row(3 * j + k);
            for (p, gp) in grad.iter_mut().enumerate() {
                *gp += gk * row[p];
            }
        }
    }

    let mut beta_term = 0.0;
    if let Some(gt) = gt_shape {
        let diff: Vec<f64> = shape.beta.iter().zip(gt.beta.iter()).map(|(a, b)| a - b).collect();
        beta_term = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        if beta_term > 0.0 {
            for (i, d) in diff.iter().enumerate() {
                grad[i] += weights.lambda_beta * d / beta_term;
            }
        }
    }
    let mut theta_term = 0.0;
    if let Some(gt) = gt_params {
        let a = params.to_vec();
        let b = gt.to_vec();
        let diff: Vec<f64> = a[..NUM_THETA].iter().zip(&b[..NUM_THETA]).map(|(x, y)| x - y).collect();
        theta_term = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        if theta_term > 0.0 {
            for (i, d) in diff.iter().enumerate() {
                grad[NUM_BETA + i] += weights.lambda_theta * d / theta_term;
            }
        }
    }

    let total = weights.lambda_beta * beta_term
        + weights.lambda_theta * theta_term
        + weights.lambda_pos * pose_term
        + weights.lambda_sil * sil_term;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("fitting objective is {total}")));
    }
    Ok(HsLoss {
        total,
        beta: beta_term,
        theta: theta_term,
        pose: pose_term,
        silhouette: sil_term,
        grad_beta: std::array::from_fn(|i| grad[i]),
        grad_params: std::array::from_fn(|i| grad[NUM_BETA + i]),
    })
}

/// Outcome of [`optimize_shape`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub shape: CapsuleShape,
    pub params: CapsulePose,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub history: Vec<f64>,
}

/// Steps of the same order as one Adam update for each parameter group.
fn step_sizes() -> [f64; NUM_PARAMS] {
    std::array::from_fn(|i| match i {
        i if i < BETA_SCALE => 1.5,
        i if i < NUM_BETA => 0.004,
        i if i < NUM_BETA + NUM_THETA => 0.01,
        _ => 3.0,
    })
}

const DIVERGENCE_STEPS: usize = 10;
/// A step counts towards divergence when its loss exceeds this multiple of
/// the starting loss (with an absolute floor of 1).
const DIVERGENCE_FACTOR: f64 = 10.0;

/// Test-time refinement of shape and pose against a skeleton and a mask.
///
/// Runs Adam with per-group step sizes and a cosine schedule on the weakly
/// supervised terms, projects the shape back into its bounds after every
/// step, and returns the best iterate seen.
#[allow(clippy::too_many_arguments)]
pub fn optimize_shape(
    init_shape: &CapsuleShape,
    init_params: &CapsulePose,
    target_pose: &Pose3D,
    person_mask: ArrayView2<f64>,
    camera: &Camera,
    weights: &SsfWeights,
    iters: usize,
) -> Result<FitResult> {
    if iters == 0 {
        return Err(validation!("optimize_shape needs at least one iteration"));
    }
    let weights = weights.weak();
    let eval = |s: &CapsuleShape, p: &CapsulePose| loss_hs(s, p, None, None, target_pose, person_mask, camera, &weights);

    let mut shape = *init_shape;
    let mut params = *init_params;
    let mut x: Vec<f64> = shape.beta.iter().copied().chain(params.to_vec()).collect();
    let lr = step_sizes();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; NUM_PARAMS];
    let mut v = vec![0.0; NUM_PARAMS];

    let first = eval(&shape, &params)?;
    let initial_loss = first.total;
    let mut best = (initial_loss, shape, params);
    let mut history = vec![initial_loss];
    let mut current = first;
    let mut bad_steps = 0;
    for it in 0..iters {
        let g: Vec<f64> = current.grad_beta.iter().chain(current.grad_params.iter()).copied().collect();
        if g.iter().all(|&gi| gi == 0.0) {
            break;
        }
        let schedule = 0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / iters as f64).cos());
        let t = (it + 1) as i32;
        for i in 0..NUM_PARAMS {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            x[i] -= lr[i] * schedule * mh / (vh.sqrt() + eps);
        }
        shape = CapsuleShape {
            beta: std::array::from_fn(|i| x[i]),
        }
        .clamped();
        x[..NUM_BETA].copy_from_slice(&shape.beta);
        params = CapsulePose::from_slice(&x[NUM_BETA..]);
        for w in params.theta.iter_mut() {
            let n = Vec3::from_array(*w).norm();
            if n > std::f64::consts::PI {
                let k = 1.0 - 2.0 * std::f64::consts::PI / n;
                *w = w.map(|c| c * k);
            }
        }
        x[NUM_BETA..].copy_from_slice(&params.to_vec());

        current = eval(&shape, &params)?;
        history.push(current.total);
        if current.total < best.0 {
            best = (current.total, shape, params);
        }
        if !(current.total <= (initial_loss * DIVERGENCE_FACTOR).max(initial_loss + 1.0)) {
            bad_steps += 1;
            if bad_steps >= DIVERGENCE_STEPS {
                return Err(Error::Convergence(format!(
                    "loss stayed far above its starting value {initial_loss:.6e} for {DIVERGENCE_STEPS} consecutive steps (last {:.6e}, iteration {it})",
                    current.total
                )));
            }
        } else {
            bad_steps = 0;
        }
    }
    Ok(FitResult {
        shape: best.1,
        params: best.2,
        initial_loss,
        final_loss: best.0,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbody::body::pose_body;
    use crate::synthbody::scene::{sample_pose, SceneConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> Camera {
        SceneConfig::default().camera
    }

    fn random_body(seed: u64) -> (CapsuleShape, CapsulePose, Pose3D) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut beta = TEMPLATE_BETA;
        for (i, b) in beta.iter_mut().enumerate() {
            *b *= 1.0 + rng.gen_range(-0.15..0.15);
            let (lo, hi) = CapsuleShape::bounds(i);
            *b = b.clamp(lo, hi);
        }
        let shape = CapsuleShape { beta };
        let x = rng.gen_range(-300.0..300.0);
        let params = sample_pose(&mut rng, 1.0, 0.1, Vec3::new(x, 0.0, 4000.0));
        let pose = pose_body(&shape, &params, 1).unwrap().pose;
        (shape, params, pose)
    }

    #[test]
    fn shape_init_recovers_scale() {
        for scale in [1.0, 1.2, 0.8] {
            let mut beta = TEMPLATE_BETA;
            beta[BETA_SCALE] = scale;
            let shape = CapsuleShape { beta };
            let pose = pose_body(&shape, &CapsulePose::identity(Vec3::new(0.0, 0.0, 3000.0)), 0).unwrap().pose;
            let est = shape_init(&pose).unwrap();
            assert!((est.beta[BETA_SCALE] - scale).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_init_matches_bone_lengths() {
        for seed in 0..20 {
            let (_, params, pose) = random_body(seed);
            let est = shape_init(&pose).unwrap();
            let rebuilt = pose_body(&est, &params, 0).unwrap().pose;
            for (a, b) in rebuilt.bone_lengths().iter().zip(pose.bone_lengths().iter()) {
                assert!((a / b - 1.0).abs() < 0.01);
            }
        }
    }

    #[test]
    fn shape_init_rejects_degenerate_torso() {
        let mut pose = random_body(0).2;
        pose.joints[NECK] = pose.joints[PELVIS];
        assert!(shape_init(&pose).is_err());
    }

    #[test]
    fn ik_of_rest_pose_is_identity() {
        let shape = CapsuleShape::default();
        let pose = pose_body(&shape, &CapsulePose::identity(Vec3::new(10.0, 20.0, 3000.0)), 0).unwrap().pose;
        let p = skeleton_to_pose(&pose, &shape).unwrap();
        assert!(p.theta.iter().flatten().all(|v| v.abs() < 1e-12));
        assert_eq!(p.translation, Vec3::new(10.0, 20.0, 3000.0));
    }

    #[test]
    fn ik_fk_round_trip() {
        for seed in 0..30 {
            let (shape, _, pose) = random_body(seed);
            let p = skeleton_to_pose(&pose, &shape).unwrap();
            p.validate().unwrap();
            let back = pose_body(&shape, &p, 0).unwrap().pose;
            for j in 0..NUM_JOINTS {
                assert!(back.joints[j].dist(pose.joints[j]) < 1e-6, "seed {seed} joint {j}");
            }
        }
    }

    #[test]
    fn ik_rejects_zero_bone() {
        let (shape, _, mut pose) = random_body(1);
        pose.joints[crate::skeleton::L_WRIST] = pose.joints[crate::skeleton::L_ELBOW];
        assert!(skeleton_to_pose(&pose, &shape).is_err());
    }

    #[test]
    fn loss_zero_at_ground_truth() {
        let (shape, params, pose) = random_body(2);
        let cam = camera();
        let mask = render_soft_silhouette(&shape, &params, &cam, pose.root().z);
        let l = loss_hs(&shape, &params, Some(&shape), Some(&params), &pose, mask.view(), &cam, &SsfWeights::default()).unwrap();
        assert_eq!(l.beta, 0.0);
        assert_eq!(l.theta, 0.0);
        assert!(l.pose < 1e-18);
        assert!(l.silhouette < 1e-24);
        assert!(l.total < 1e-20);
    }

    #[test]
    fn translation_pose_term_closed_form() {
        let (shape, params, pose) = random_body(3);
        let cam = camera();
        let mask = Array2::zeros((cam.height, cam.width));
        let mut moved = params;
        moved.translation.x += 10.0;
        let w = SsfWeights {
            lambda_beta: 0.0,
            lambda_theta: 0.0,
            lambda_pos: 1.0,
            lambda_sil: 0.0,
        };
        let l = loss_hs(&shape, &moved, None, None, &pose, mask.view(), &cam, &w).unwrap();
        assert!((l.pose - 1500.0).abs() < 1e-6, "{}", l.pose);
        assert!((l.total - 1500.0).abs() < 1e-6);
    }

    #[test]
    fn terms_are_weight_linear() {
        let (shape, params, pose) = random_body(4);
        let cam = camera();
        let mask = render_soft_silhouette(&shape, &params, &cam, pose.root().z);
        let mut s2 = shape;
        s2.beta[3] += 5.0;
        let mut p2 = params;
        p2.theta[4][1] += 0.2;
        let w = SsfWeights::default();
        let a = loss_hs(&s2, &p2, Some(&shape), Some(&params), &pose, mask.view(), &cam, &w).unwrap();
        let w2 = SsfWeights {
            lambda_sil: 2.0 * w.lambda_sil,
            ..w
        };
        let b = loss_hs(&s2, &p2, Some(&shape), Some(&params), &pose, mask.view(), &cam, &w2).unwrap();
        assert!(a.beta > 0.0 && a.theta > 0.0 && a.pose > 0.0 && a.silhouette > 0.0);
        let diff = b.total - a.total;
        assert!((diff - w.lambda_sil * a.silhouette).abs() < 1e-9 * a.total.max(1.0));
    }

    #[test]
    fn rejects_negative_weights() {
        let (shape, params, pose) = random_body(5);
        let cam = camera();
        let mask = Array2::zeros((cam.height, cam.width));
        let w = SsfWeights {
            lambda_pos: -1.0,
            ..Default::default()
        };
        assert!(loss_hs(&shape, &params, None, None, &pose, mask.view(), &cam, &w).is_err());
    }

    #[test]
    fn hard_silhouette_matches_ray_casting() {
        let (shape, params, _) = random_body(6);
        let cam = camera();
        let body = pose_body(&shape, &params, 1).unwrap();
        let scene = crate::synthbody::Scene {
            people: vec![body],
            occluders: vec![],
            camera: cam,
            seed: 0,
        };
        let masks = crate::synthbody::rasterize(&scene);
        let hard = render_hard_silhouette(&shape, &params, &cam);
        let mut diff = 0;
        for (a, &b) in hard.iter().zip(masks.instance_map.iter()) {
            diff += (*a != (b == 1)) as usize;
        }
        assert!(diff <= 2, "{diff} pixels differ");
    }

    #[test]
    fn optimize_from_ground_truth_is_a_no_op() {
        let (shape, params, pose) = random_body(7);
        let cam = camera();
        let mask = render_soft_silhouette(&shape, &params, &cam, pose.root().z);
        let r = optimize_shape(&shape, &params, &pose, mask.view(), &cam, &SsfWeights::default(), 20).unwrap();
        assert!(r.final_loss <= r.initial_loss);
        for (a, b) in r.shape.beta.iter().zip(shape.beta.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in r.params.to_vec().iter().zip(params.to_vec().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weights_return_init() {
        let (shape, params, pose) = random_body(8);
        let cam = camera();
        let mask = Array2::from_elem((cam.height, cam.width), 1.0);
        let w = SsfWeights {
            lambda_beta: 0.0,
            lambda_theta: 0.0,
            lambda_pos: 0.0,
            lambda_sil: 0.0,
        };
        let mut init = shape;
        init.beta[BETA_SCALE] = 1.1;
        let r = optimize_shape(&init, &params, &pose, mask.view(), &cam, &w, 10).unwrap();
        assert_eq!(r.shape, init);
        assert_eq!(r.params, params);
        assert!(optimize_shape(&init, &params, &pose, mask.view(), &cam, &w, 0).is_err());
    }

    fn perturbed(shape: &CapsuleShape, params: &CapsulePose, seed: u64, amount: f64) -> (CapsuleShape, CapsulePose) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = *shape;
        for b in s.beta.iter_mut() {
            *b *= 1.0 + amount * rng.gen_range(-1.0..1.0);
        }
        let mut p = *params;
        for w in p.theta.iter_mut().flatten() {
            *w += amount * rng.gen_range(-1.0..1.0);
        }
        p.translation = p.translation + Vec3::new(1.0, 1.0, 1.0) * (100.0 * amount * rng.gen_range(-1.0..1.0));
        (s.clamped(), p)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cam = Camera::centered(35.0, 32, 32).unwrap();
        for seed in 0..3 {
            let (gt_s, gt_p, pose) = random_body(100 + seed);
            let mask = render_hard_silhouette(&gt_s, &gt_p, &cam).mapv(|b| b as u8 as f64);
            let (s, p) = perturbed(&gt_s, &gt_p, seed, 0.05);
            let w = SsfWeights::default();
            let f = |s: &CapsuleShape, p: &CapsulePose| {
                loss_hs(s, p, Some(&gt_s), Some(&gt_p), &pose, mask.view(), &cam, &w).unwrap()
            };
            let l = f(&s, &p);
            let analytic: Vec<f64> = l.grad_beta.iter().chain(l.grad_params.iter()).copied().collect();
            let x: Vec<f64> = s.beta.iter().copied().chain(p.to_vec()).collect();
            let numeric: Vec<f64> = (0..x.len())
                .map(|i| {
                    let h = 1e-5 * x[i].abs().max(1.0);
                    let at = |d: f64| {
                        let mut y = x.clone();
                        y[i] += d;
                        let ss = CapsuleShape { beta: std::array::from_fn(|k| y[k]) };
                        f(&ss, &CapsulePose::from_slice(&y[NUM_BETA..])).total
                    };
                    (at(h) - at(-h)) / (2.0 * h)
                })
                .collect();
            let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..x.len() {
                let err = (analytic[i] - numeric[i]).abs() / numeric[i].abs().max(analytic[i].abs()).max(1e-3 * scale);
                assert!(err <= 1e-4, "seed {seed} param {i}: analytic {} numeric {}", analytic[i], numeric[i]);
            }
        }
    }

    #[test]
    fn optimisation_recovers_perturbed_shape() {
        let cam = camera();
        let (gt_s, gt_p, pose) = random_body(11);
        let mask = render_hard_silhouette(&gt_s, &gt_p, &cam).mapv(|b| b as u8 as f64);
        let init = shape_init(&pose).unwrap();
        let mut s = gt_s;
        for (i, b) in s.beta.iter_mut().enumerate() {
            *b *= if i % 2 == 0 { 1.1 } else { 0.9 };
        }
        let _ = init;
        let p = skeleton_to_pose(&pose, &s).unwrap();
        let before = mask_iou(&render_hard_silhouette(&s.clamped(), &p, &cam), mask.view());
        let r = optimize_shape(&s.clamped(), &p, &pose, mask.view(), &cam, &SsfWeights::default(), 200).unwrap();
        let after = mask_iou(&render_hard_silhouette(&r.shape, &r.params, &cam), mask.view());
        assert!(r.final_loss < r.initial_loss);
        assert!(after > before && after >= 0.9, "iou {before} -> {after}");
    }
}

//! Per-joint occlusion labels (truncated / occluded / visible) and shape fitting.

pub mod fit;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{validation, Result};
use crate::geom::{Ray, Vec3};
use crate::skeleton::NUM_JOINTS;
use crate::synthbody::body::{joint_radius, PosedBody};
use crate::synthbody::raster::{rasterize, scene_primitives, MaskSet};
use crate::synthbody::Scene;

pub use fit::{loss_hs, optimize_shape, shape_init, skeleton_to_pose, HsLoss, SsfWeights};

pub const TRUNCATED: u8 = 0;
pub const OCCLUDED: u8 = 1;
pub const VISIBLE: u8 = 2;

/// One row of 15 labels per person, in scene order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OcclusionLabels {
    pub labels: Vec<[u8; NUM_JOINTS]>,
}

impl OcclusionLabels {
    pub fn validate(&self) -> Result<()> {
        if self.labels.iter().flatten().any(|&l| l > VISIBLE) {
            return Err(validation!("occlusion labels must be 0, 1 or 2"));
        }
        Ok(())
    }

    pub fn num_people(&self) -> usize {
        self.labels.len()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().flatten().filter(|&&l| l == label).count()
    }
}

/// Visibility depth tolerance for a joint with front-surface radius `radius`.
pub fn depth_tolerance(radius: f64) -> f64 {
    0.25 * radius + 5.0
}

/// Where a joint projects and the depth its front surface sits at.
struct JointProbe {
    pixel: (f64, f64),
    front: f64,
    tolerance: f64,
}

fn probe(body: &PosedBody, joint: usize, camera: &Camera) -> Option<JointProbe> {
    let p = body.pose.joints[joint];
    let pixel = camera.project(p).ok()?;
    if !camera.in_image(pixel) {
        return None;
    }
    let r = joint_radius(body, joint);
    Some(JointProbe {
        pixel,
        front: p.z - r,
        tolerance: depth_tolerance(r),
    })
}

fn decide(owner_is_own_part: bool, surface_depth: f64, probe: &JointProbe) -> u8 {
    if owner_is_own_part || surface_depth >= probe.front - probe.tolerance {
        VISIBLE
    } else {
        OCCLUDED
    }
}

/// Labels every joint of every person from the rasterized masks.
///
/// A joint is visible when the pixel it falls in is owned by one of its own
/// body parts (incident to it or enclosing it), or when the nearest surface there is no more than
/// the tolerance in front of the joint's front surface.
pub fn classify_joints(scene: &Scene, masks: &MaskSet) -> Result<OcclusionLabels> {
    let cam = &scene.camera;
    if masks.width() != cam.width || masks.height() != cam.height {
        return Err(validation!(
            "mask size {}x{} does not match camera {}x{}",
            masks.width(),
            masks.height(),
            cam.width,
            cam.height
        ));
    }
    let labels = scene
        .people
        .iter()
        .enumerate()
        .map(|(i, body)| {
            std::array::from_fn(|j| {
                let Some(pr) = probe(body, j, cam) else {
                    return TRUNCATED;
                };
                let (col, row) = (pr.pixel.0.floor() as usize, pr.pixel.1.floor() as usize);
                let own = masks.instance_map[[row, col]] == i as i32 + 1
                    && body.own_part(j, masks.part_map[[row, col]] as usize);
                decide(own, masks.depth_buffer[[row, col]], &pr)
            })
        })
        .collect();
    Ok(OcclusionLabels { labels })
}

/// Rasterizes the scene at `supersample` times the camera resolution and
/// classifies from those masks. Labels do not depend on pixel size except
/// near part boundaries, where finer masks follow the exact geometry more closely.
pub fn label_scene(scene: &Scene, supersample: usize) -> Result<OcclusionLabels> {
    if supersample == 0 {
        return Err(validation!("label supersampling factor must be at least 1"));
    }
    if supersample == 1 {
        return classify_joints(scene, &rasterize(scene));
    }
    let fine = Scene {
        camera: scene.camera.scaled(supersample)?,
        ..scene.clone()
    };
    classify_joints(&fine, &rasterize(&fine))
}

/// Independent label for one joint: casts the exact ray through the joint's
/// projection against every primitive, no rasterization involved.
pub fn ray_oracle(scene: &Scene, person: usize, joint: usize) -> u8 {
    let body = &scene.people[person];
    let Some(pr) = probe(body, joint, &scene.camera) else {
        return TRUNCATED;
    };
    let ray = Ray::new(Vec3::ZERO, scene.camera.ray_dir(pr.pixel.0, pr.pixel.1));
    let mut nearest = f64::INFINITY;
    let mut own = false;
    for prim in scene_primitives(scene) {
        if let Some(t) = prim.shape.intersect(&ray) {
            if t < nearest {
                nearest = t;
                own = prim.owner == person as i32 + 1 && body.own_part(joint, prim.part as usize);
            }
        }
    }
    decide(own, nearest, &pr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{L_KNEE, PELVIS};
    use crate::synthbody::body::{pose_body, CapsulePose, CapsuleShape};
    use crate::synthbody::scene::{sample_scene, SceneConfig};
    use crate::synthbody::{rasterize, Occluder};

    fn frontal(x: f64, z: f64) -> PosedBody {
        let mut params = CapsulePose::identity(Vec3::new(x, 0.0, z));
        params.theta[3] = [0.0, 0.0, 1.3];
        params.theta[6] = [0.0, 0.0, -1.3];
        pose_body(&CapsuleShape::default(), &params, 1).unwrap()
    }

    fn scene(people: Vec<PosedBody>, occluders: Vec<Occluder>) -> Scene {
        Scene {
            people,
            occluders,
            camera: SceneConfig::default().camera,
            seed: 0,
        }
    }

    #[test]
    fn unobstructed_frontal_person_is_fully_visible() {
        let s = scene(vec![frontal(0.0, 4000.0)], vec![]);
        let labels = classify_joints(&s, &rasterize(&s)).unwrap();
        assert_eq!(labels.labels[0], [VISIBLE; NUM_JOINTS]);
        for j in 0..NUM_JOINTS {
            assert_eq!(ray_oracle(&s, 0, j), VISIBLE);
        }
    }

    #[test]
    fn out_of_frame_joint_is_truncated() {
        // pelvis far to the left so the projection has u < 0
        let s = scene(vec![frontal(-3500.0, 4000.0)], vec![]);
        let labels = classify_joints(&s, &rasterize(&s)).unwrap();
        let (u, _) = s.camera.project(s.people[0].pose.joints[PELVIS]).unwrap();
        assert!(u < 0.0);
        assert_eq!(labels.labels[0][PELVIS], TRUNCATED);
        assert_eq!(ray_oracle(&s, 0, PELVIS), TRUNCATED);
    }

    #[test]
    fn box_on_the_sight_line_occludes() {
        let body = frontal(0.0, 4000.0);
        let knee = body.pose.joints[L_KNEE];
        let c = knee * (2500.0 / knee.z);
        let half = Vec3::new(60.0, 60.0, 60.0);
        let s = scene(vec![body], vec![Occluder::Box { min: c - half, max: c + half }]);
        let labels = classify_joints(&s, &rasterize(&s)).unwrap();
        assert_eq!(labels.labels[0][L_KNEE], OCCLUDED);
        assert_eq!(ray_oracle(&s, 0, L_KNEE), OCCLUDED);
    }

    #[test]
    fn person_behind_torso_is_occluded() {
        let front = frontal(0.0, 3000.0);
        // second person placed so its pelvis sits on the ray through the first torso
        let behind_pelvis = front.pose.joints[PELVIS] * (4200.0 / front.pose.joints[PELVIS].z);
        let mut back = frontal(behind_pelvis.x, behind_pelvis.z);
        back.person_id = 2;
        let s = scene(vec![front, back], vec![]);
        let labels = classify_joints(&s, &rasterize(&s)).unwrap();
        assert_eq!(labels.labels[1][PELVIS], OCCLUDED);
        assert_eq!(ray_oracle(&s, 1, PELVIS), OCCLUDED);
        assert_eq!(labels.labels[0], [VISIBLE; NUM_JOINTS]);
    }

    #[test]
    fn rejects_mismatched_masks() {
        let s = scene(vec![frontal(0.0, 4000.0)], vec![]);
        let mut other = s.clone();
        other.camera.width = 64;
        other.camera.cx = 32.0;
        assert!(classify_joints(&s, &rasterize(&other)).is_err());
    }

    #[test]
    fn adding_an_occluder_never_reveals_a_joint() {
        let cfg = SceneConfig {
            occluder_density: 2.0,
            ..Default::default()
        };
        for seed in 0..40 {
            let full = sample_scene(seed, &cfg).unwrap();
            let mut fewer = full.clone();
            if fewer.occluders.pop().is_none() {
                continue;
            }
            let with = classify_joints(&full, &rasterize(&full)).unwrap();
            let without = classify_joints(&fewer, &rasterize(&fewer)).unwrap();
            for (a, b) in without.labels.iter().flatten().zip(with.labels.iter().flatten()) {
                assert!(!(*a == OCCLUDED && *b == VISIBLE));
            }
        }
    }

    #[test]
    fn labels_are_stable_under_in_plane_translation() {
        for dx in [-300.0, -100.0, 0.0, 150.0, 300.0] {
            let s = scene(vec![frontal(dx, 4000.0)], vec![]);
            let labels = classify_joints(&s, &rasterize(&s)).unwrap();
            assert_eq!(labels.labels[0], [VISIBLE; NUM_JOINTS]);
        }
    }

    #[test]
    fn finer_masks_keep_truncation_and_track_the_oracle() {
        let cfg = SceneConfig::default();
        let (mut coarse_miss, mut fine_miss) = (0, 0);
        for seed in 0..60 {
            let s = sample_scene(seed, &cfg).unwrap();
            let coarse = label_scene(&s, 1).unwrap();
            assert_eq!(coarse, classify_joints(&s, &rasterize(&s)).unwrap());
            let fine = label_scene(&s, 4).unwrap();
            for (i, (c, f)) in coarse.labels.iter().zip(&fine.labels).enumerate() {
                for j in 0..NUM_JOINTS {
                    assert_eq!(c[j] == TRUNCATED, f[j] == TRUNCATED);
                    let o = ray_oracle(&s, i, j);
                    coarse_miss += usize::from(c[j] != o);
                    fine_miss += usize::from(f[j] != o);
                }
            }
        }
        assert!(fine_miss <= coarse_miss, "{fine_miss} > {coarse_miss}");
        assert!(label_scene(&scene(vec![frontal(0.0, 4000.0)], vec![]), 0).is_err());
    }
}

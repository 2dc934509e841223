//! Ground-truth maps: keypoint Gaussians, 3D part affinity fields and
//! root-depth discs, plus their visible / occluded split.
//!
//! Maps are stored channel-first (`[C, h, w]`) at heatmap resolution.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::camera::{image_to_heatmap, Camera};
use crate::error::{validation, Result};
use crate::occlabel::{OcclusionLabels, OCCLUDED, TRUNCATED, VISIBLE};
use crate::pose::Pose3D;
use crate::skeleton::{EDGES, NUM_EDGES, NUM_JOINTS, NUM_TORSO, TORSO};

pub const PAF_CHANNELS: usize = NUM_EDGES * 3;
/// Occluded keypoint supervision extends this many sigmas around the joint.
pub const SUPPORT_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    /// Gaussian sigma in heatmap cells.
    pub sigma: f64,
    /// Half-width of PAF support in heatmap cells.
    pub limb_width: f64,
    /// Radius of root-depth discs in heatmap cells.
    pub root_radius: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            sigma: 2.0,
            limb_width: 1.5,
            root_radius: 2.0,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("limb_width", self.limb_width), ("root_radius", self.root_radius)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(validation!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Keypoint, PAF and root-depth maps for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    /// `[15, h, w]`, values in [0, 1].
    pub keypoints: Array3<f32>,
    /// `[42, h, w]`: per edge (unit x, unit y, child depth minus parent depth in mm).
    pub pafs: Array3<f32>,
    /// `[7, h, w]`: normalised depth of each torso joint.
    pub root_depth: Array3<f32>,
}

impl HeatmapSet {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            keypoints: Array3::zeros((NUM_JOINTS, h, w)),
            pafs: Array3::zeros((PAF_CHANNELS, h, w)),
            root_depth: Array3::zeros((NUM_TORSO, h, w)),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.keypoints.dim();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims();
        if self.pafs.dim() != (PAF_CHANNELS, h, w) || self.root_depth.dim() != (NUM_TORSO, h, w) {
            return Err(validation!("heatmap set channel shapes are inconsistent"));
        }
        if self.keypoints.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(validation!("keypoint values must lie in [0, 1]"));
        }
        for e in 0..NUM_EDGES {
            for ((&x, &y), &z) in self
                .pafs
                .index_axis(ndarray::Axis(0), 3 * e)
                .iter()
                .zip(self.pafs.index_axis(ndarray::Axis(0), 3 * e + 1).iter())
                .zip(self.pafs.index_axis(ndarray::Axis(0), 3 * e + 2).iter())
            {
                let n = x * x + y * y;
                if !z.is_finite() || !(n == 0.0 || (n - 1.0).abs() < 1e-5) {
                    return Err(validation!("PAF of edge {e} is neither unit nor zero ({x}, {y})"));
                }
            }
        }
        if self.root_depth.iter().any(|v| !v.is_finite()) {
            return Err(validation!("root depth maps must be finite"));
        }
        Ok(())
    }
}

/// One person's maps before cross-person composition.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonMaps {
    pub maps: HeatmapSet,
    /// `[14, h, w]` depth of the limb at each PAF support cell, infinite elsewhere.
    pub paf_depth: Array3<f64>,
    /// `[15, h, w]` cells within [`SUPPORT_SIGMAS`] of each in-view joint.
    pub keypoint_support: Array3<bool>,
    /// Which joints are in view (and hence drawn).
    pub in_view: [bool; NUM_JOINTS],
}

/// Which of a person's joints and edges a composed map should include.
#[derive(Debug, Clone, Copy)]
struct Selection {
    joints: [bool; NUM_JOINTS],
    edges: [bool; NUM_EDGES],
}

impl Selection {
    fn everything() -> Self {
        Self {
            joints: [true; NUM_JOINTS],
            edges: [true; NUM_EDGES],
        }
    }

    fn from_labels(labels: &[u8; NUM_JOINTS], want: u8) -> Self {
        let edges = std::array::from_fn(|e| edge_class(labels, e) == Some(want));
        Self {
            joints: labels.map(|l| l == want),
            edges,
        }
    }
}

/// Visibility class of an edge: visible when both ends are visible, occluded
/// when any end is occluded and none truncated, dropped otherwise.
pub fn edge_class(labels: &[u8; NUM_JOINTS], edge: usize) -> Option<u8> {
    let (p, c) = EDGES[edge];
    let (a, b) = (labels[p], labels[c]);
    if a == TRUNCATED || b == TRUNCATED {
        None
    } else if a == VISIBLE && b == VISIBLE {
        Some(VISIBLE)
    } else {
        Some(OCCLUDED)
    }
}

fn heatmap_point(camera: &Camera, p: crate::geom::Vec3) -> Option<(f64, f64)> {
    let px = camera.project(p).ok()?;
    camera
        .in_image(px)
        .then(|| (image_to_heatmap(px.0), image_to_heatmap(px.1)))
}

/// Distance from `q` to segment `a`-`b` and the segment parameter of the closest point.
fn point_segment(q: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let d = (b.0 - a.0, b.1 - a.1);
    let len2 = d.0 * d.0 + d.1 * d.1;
    let t = if len2 > 0.0 {
        (((q.0 - a.0) * d.0 + (q.1 - a.1) * d.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = (a.0 + t * d.0, a.1 + t * d.1);
    (((q.0 - c.0).powi(2) + (q.1 - c.1).powi(2)).sqrt(), t)
}

/// Gaussian centred at `(x, y)`, rescaled so the grid cell nearest to the
/// centre reads exactly 1.
fn gaussian_at(cell: (f64, f64), centre: (f64, f64), sigma: f64) -> f64 {
    let near = (centre.0.round(), centre.1.round());
    let d0 = (near.0 - centre.0).powi(2) + (near.1 - centre.1).powi(2);
    let d = (cell.0 - centre.0).powi(2) + (cell.1 - centre.1).powi(2);
    (-(d - d0) / (2.0 * sigma * sigma)).exp().min(1.0)
}

/// Maps of a single person.
pub fn person_maps(pose: &Pose3D, camera: &Camera, cfg: &TargetConfig) -> Result<PersonMaps> {
    cfg.validate()?;
    let (w, h) = camera.heatmap_size();
    let mut maps = HeatmapSet::zeros(h, w);
    let mut paf_depth = Array3::from_elem((NUM_EDGES, h, w), f64::INFINITY);
    let mut keypoint_support = Array3::from_elem((NUM_JOINTS, h, w), false);
    let pts: [Option<(f64, f64)>; NUM_JOINTS] = std::array::from_fn(|j| heatmap_point(camera, pose.joints[j]));
    let support_r = SUPPORT_SIGMAS * cfg.sigma;

    for (j, pt) in pts.iter().enumerate() {
        let Some(c) = *pt else { continue };
        for ((row, col), v) in maps.keypoints.slice_mut(s![j, .., ..]).indexed_iter_mut() {
            let cell = (col as f64, row as f64);
            *v = gaussian_at(cell, c, cfg.sigma) as f32;
            keypoint_support[[j, row, col]] = (cell.0 - c.0).hypot(cell.1 - c.1) <= support_r;
        }
    }

    for (e, &(p, c)) in EDGES.iter().enumerate() {
        let (Some(a), Some(b)) = (pts[p], pts[c]) else { continue };
        let (za, zb) = (pose.joints[p].z, pose.joints[c].z);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = dx.hypot(dy);
        let dir = if len > 1e-9 {
            (dx / len, dy / len)
        } else {
            log::debug!("edge {e} of person {} projects to a point", pose.person_id);
            (0.0, 0.0)
        };
        let dz = (zb - za) as f32;
        for row in 0..h {
            for col in 0..w {
                let (dist, t) = point_segment((col as f64, row as f64), a, b);
                if dist <= cfg.limb_width {
                    maps.pafs[[3 * e, row, col]] = dir.0 as f32;
                    maps.pafs[[3 * e + 1, row, col]] = dir.1 as f32;
                    maps.pafs[[3 * e + 2, row, col]] = dz;
                    paf_depth[[e, row, col]] = za + t * (zb - za);
                }
            }
        }
    }

    for (t, &j) in TORSO.iter().enumerate() {
        let Some(c) = pts[j] else { continue };
        let z = camera.encode_depth(pose.joints[j].z) as f32;
        for ((row, col), v) in maps.root_depth.slice_mut(s![t, .., ..]).indexed_iter_mut() {
            if (col as f64 - c.0).hypot(row as f64 - c.1) <= cfg.root_radius {
                *v = z;
            }
        }
    }

    Ok(PersonMaps {
        maps,
        paf_depth,
        keypoint_support,
        in_view: pts.map(|p| p.is_some()),
    })
}

pub fn person_components(poses: &[Pose3D], camera: &Camera, cfg: &TargetConfig) -> Result<Vec<PersonMaps>> {
    poses.iter().map(|p| person_maps(p, camera, cfg)).collect()
}

/// Cross-person composition: max for keypoints, nearest person for PAFs and root depth.
fn compose(components: &[PersonMaps], selections: &[Selection], h: usize, w: usize) -> HeatmapSet {
    let mut out = HeatmapSet::zeros(h, w);
    let mut best_paf = Array3::from_elem((NUM_EDGES, h, w), f64::INFINITY);
    for (pm, sel) in components.iter().zip(selections) {
        for j in 0..NUM_JOINTS {
            if !sel.joints[j] {
                continue;
            }
            out.keypoints
                .slice_mut(s![j, .., ..])
                .zip_mut_with(&pm.maps.keypoints.slice(s![j, .., ..]), |o, &v| *o = o.max(v));
        }
        for e in 0..NUM_EDGES {
            if !sel.edges[e] {
                continue;
            }
            for row in 0..h {
                for col in 0..w {
                    let d = pm.paf_depth[[e, row, col]];
                    if d < best_paf[[e, row, col]] {
                        best_paf[[e, row, col]] = d;
                        for k in 0..3 {
                            out.pafs[[3 * e + k, row, col]] = pm.maps.pafs[[3 * e + k, row, col]];
                        }
                    }
                }
            }
        }
        for (t, &j) in TORSO.iter().enumerate() {
            if !sel.joints[j] {
                continue;
            }
            out.root_depth
                .slice_mut(s![t, .., ..])
                .zip_mut_with(&pm.maps.root_depth.slice(s![t, .., ..]), |o, &v| {
                    if v > 0.0 && (*o == 0.0 || v < *o) {
                        *o = v;
                    }
                });
        }
    }
    out
}

fn dims_of(components: &[PersonMaps], camera: &Camera) -> (usize, usize) {
    components.first().map(|c| c.maps.dims()).unwrap_or_else(|| {
        let (w, h) = camera.heatmap_size();
        (h, w)
    })
}

pub fn make_keypoint_maps(poses: &[Pose3D], camera: &Camera, sigma: f64) -> Result<Array3<f32>> {
    let cfg = TargetConfig {
        sigma,
        ..Default::default()
    };
    Ok(compose_all(poses, camera, &cfg)?.keypoints)
}

pub fn make_paf_maps(poses: &[Pose3D], camera: &Camera, limb_width: f64) -> Result<Array3<f32>> {
    let cfg = TargetConfig {
        limb_width,
        ..Default::default()
    };
    Ok(compose_all(poses, camera, &cfg)?.pafs)
}

pub fn make_root_depth_maps(poses: &[Pose3D], camera: &Camera, radius: f64) -> Result<Array3<f32>> {
    let cfg = TargetConfig {
        root_radius: radius,
        ..Default::default()
    };
    Ok(compose_all(poses, camera, &cfg)?.root_depth)
}

fn compose_all(poses: &[Pose3D], camera: &Camera, cfg: &TargetConfig) -> Result<HeatmapSet> {
    let comps = person_components(poses, camera, cfg)?;
    let (h, w) = dims_of(&comps, camera);
    Ok(compose(&comps, &vec![Selection::everything(); comps.len()], h, w))
}

/// Cells where occluded supervision applies.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportMask {
    /// `[15, h, w]`
    pub keypoints: Array3<f32>,
    /// `[42, h, w]`, the same mask repeated over an edge's three channels.
    pub pafs: Array3<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    pub all: HeatmapSet,
    pub visible: HeatmapSet,
    pub occluded: HeatmapSet,
    pub occluded_support: SupportMask,
}

/// Splits per-person maps into all / visible / occluded targets.
pub fn split_by_visibility(components: &[PersonMaps], labels: &OcclusionLabels, camera: &Camera) -> Result<TargetBundle> {
    labels.validate()?;
    if labels.num_people() != components.len() {
        return Err(validation!(
            "{} label rows for {} people",
            labels.num_people(),
            components.len()
        ));
    }
    let (h, w) = dims_of(components, camera);
    let n = components.len();
    // only in-view joints are drawn; truncation in the labels drops the rest
    let all_sel: Vec<Selection> = components
        .iter()
        .zip(&labels.labels)
        .map(|(c, l)| {
            let mut row = *l;
            for (j, v) in c.in_view.iter().enumerate() {
                if !v {
                    row[j] = TRUNCATED;
                }
            }
            Selection {
                joints: row.map(|x| x != TRUNCATED),
                edges: std::array::from_fn(|e| edge_class(&row, e).is_some()),
            }
        })
        .collect();
    let vis_sel: Vec<Selection> = labels.labels.iter().map(|l| Selection::from_labels(l, VISIBLE)).collect();
    let occ_sel: Vec<Selection> = labels.labels.iter().map(|l| Selection::from_labels(l, OCCLUDED)).collect();
    let all = compose(components, &all_sel, h, w);
    let visible = compose(components, &vis_sel, h, w);
    let occluded = compose(components, &occ_sel, h, w);

    let mut support = SupportMask {
        keypoints: Array3::zeros((NUM_JOINTS, h, w)),
        pafs: Array3::zeros((PAF_CHANNELS, h, w)),
    };
    for i in 0..n {
        let (pm, sel) = (&components[i], &occ_sel[i]);
        for j in (0..NUM_JOINTS).filter(|&j| sel.joints[j]) {
            support
                .keypoints
                .slice_mut(s![j, .., ..])
                .zip_mut_with(&pm.keypoint_support.slice(s![j, .., ..]), |o, &m| {
                    if m {
                        *o = 1.0
                    }
                });
        }
        for e in (0..NUM_EDGES).filter(|&e| sel.edges[e]) {
            for ((row, col), d) in pm.paf_depth.slice(s![e, .., ..]).indexed_iter() {
                if d.is_finite() {
                    for k in 0..3 {
                        support.pafs[[3 * e + k, row, col]] = 1.0;
                    }
                }
            }
        }
    }
    Ok(TargetBundle {
        all,
        visible,
        occluded,
        occluded_support: support,
    })
}

/// Targets for a scene given its occlusion labels.
pub fn build_targets(poses: &[Pose3D], labels: &OcclusionLabels, camera: &Camera, cfg: &TargetConfig) -> Result<TargetBundle> {
    let comps = person_components(poses, camera, cfg)?;
    split_by_visibility(&comps, labels, camera)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::skeleton::{L_ELBOW, L_SHOULDER, PELVIS};

    fn cam() -> Camera {
        Camera::centered(140.0, 128, 128).unwrap()
    }

    /// A pose whose joints all sit on a horizontal line, shifted per joint so none coincide.
    fn line_pose(z: f64) -> Pose3D {
        Pose3D::new(0, std::array::from_fn(|j| Vec3::new(-1400.0 + 200.0 * j as f64, 0.0, z)))
    }

    /// Places a joint so it projects onto the centre of heatmap cell (x, y).
    fn at_cell(camera: &Camera, x: f64, y: f64, z: f64) -> Vec3 {
        let u = (x + 0.5) * 4.0;
        let v = (y + 0.5) * 4.0;
        camera.backproject((u, v), z).unwrap()
    }

    #[test]
    fn gaussian_peak_and_sigma_value() {
        let c = cam();
        let mut pose = line_pose(3000.0);
        pose.joints[PELVIS] = at_cell(&c, 10.0, 12.0, 3000.0);
        let k = make_keypoint_maps(&[pose], &c, 2.0).unwrap();
        assert_eq!(k[[PELVIS, 12, 10]], 1.0);
        assert!((k[[PELVIS, 12, 12]] as f64 - (-0.5f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn off_grid_peak_is_one_at_nearest_cell() {
        let c = cam();
        let mut pose = line_pose(3000.0);
        pose.joints[PELVIS] = c.backproject((41.3, 57.9), 3000.0).unwrap();
        let k = make_keypoint_maps(&[pose], &c, 2.0).unwrap();
        let (x, y) = (image_to_heatmap(41.3), image_to_heatmap(57.9));
        assert_eq!(k[[PELVIS, y.round() as usize, x.round() as usize]], 1.0);
        let max = k.slice(s![PELVIS, .., ..]).iter().fold(0.0f32, |m, &v| m.max(v));
        assert_eq!(max, 1.0);
        // log-quadratic fit along x recovers the centre
        let (r, cc) = (y.round() as usize, x.round() as usize);
        let (l, m, rr) = (
            (k[[PELVIS, r, cc - 1]] as f64).ln(),
            (k[[PELVIS, r, cc]] as f64).ln(),
            (k[[PELVIS, r, cc + 1]] as f64).ln(),
        );
        let off = 0.5 * (l - rr) / (l - 2.0 * m + rr);
        assert!((cc as f64 + off - x).abs() < 1e-4);
    }

    #[test]
    fn overlapping_people_take_the_max() {
        let c = cam();
        let mut a = line_pose(3000.0);
        let mut b = line_pose(3000.0);
        a.joints[PELVIS] = at_cell(&c, 10.0, 10.0, 3000.0);
        b.joints[PELVIS] = at_cell(&c, 16.0, 10.0, 3000.0);
        let both = make_keypoint_maps(&[a.clone(), b.clone()], &c, 2.0).unwrap();
        let ka = make_keypoint_maps(&[a], &c, 2.0).unwrap();
        let kb = make_keypoint_maps(&[b], &c, 2.0).unwrap();
        for ((x, y), z) in ka.iter().zip(kb.iter()).zip(both.iter()) {
            assert_eq!(x.max(*y), *z);
        }
    }

    #[test]
    fn horizontal_limb_points_right() {
        let c = cam();
        let mut pose = line_pose(3000.0);
        pose.joints[L_SHOULDER] = at_cell(&c, 5.0, 20.0, 3000.0);
        pose.joints[L_ELBOW] = at_cell(&c, 15.0, 20.0, 3000.0) + Vec3::new(0.0, 0.0, 0.0);
        let paf = make_paf_maps(&[pose.clone()], &c, 1.5).unwrap();
        let e = 3;
        assert_eq!(EDGES[e], (L_SHOULDER, L_ELBOW));
        assert_eq!(paf[[3 * e, 20, 10]], 1.0);
        assert_eq!(paf[[3 * e + 1, 20, 10]], 0.0);
        assert_eq!(paf[[3 * e, 23, 10]], 0.0);
        let dz = (pose.joints[L_ELBOW].z - pose.joints[L_SHOULDER].z) as f32;
        assert_eq!(paf[[3 * e + 2, 20, 10]], dz);
    }

    #[test]
    fn nearer_person_wins_paf_conflicts() {
        let c = cam();
        let mut near = line_pose(2500.0);
        let mut far = line_pose(5000.0);
        near.joints[L_SHOULDER] = at_cell(&c, 5.0, 20.0, 2500.0);
        near.joints[L_ELBOW] = at_cell(&c, 15.0, 20.0, 2700.0);
        far.joints[L_SHOULDER] = at_cell(&c, 15.0, 20.0, 5000.0);
        far.joints[L_ELBOW] = at_cell(&c, 5.0, 20.0, 5100.0);
        let paf = make_paf_maps(&[far, near], &c, 1.5).unwrap();
        assert_eq!(paf[[9, 20, 10]], 1.0);
        assert_eq!(paf[[11, 20, 10]], 200.0);
    }

    #[test]
    fn root_depth_disc_values() {
        let c = Camera::centered(1000.0, 640, 480).unwrap();
        let pose = Pose3D::new(0, std::array::from_fn(|j| Vec3::new(10.0 * j as f64, 0.0, 3000.0)));
        let r = make_root_depth_maps(&[pose], &c, 2.0).unwrap();
        let (x, y) = (image_to_heatmap(320.0), image_to_heatmap(240.0));
        assert_eq!(r[[0, y.round() as usize, x.round() as usize]], 480.0);
        let c2 = Camera::centered(2000.0, 640, 480).unwrap();
        let pose = Pose3D::new(0, std::array::from_fn(|j| Vec3::new(10.0 * j as f64, 0.0, 3000.0)));
        let r2 = make_root_depth_maps(&[pose], &c2, 2.0).unwrap();
        assert_eq!(r2[[0, y.round() as usize, x.round() as usize]], 240.0);
        assert!((c.decode_depth(480.0) - 3000.0).abs() < 3000.0 * 1e-9);
    }

    fn labels(row: [u8; NUM_JOINTS]) -> OcclusionLabels {
        OcclusionLabels { labels: vec![row] }
    }

    fn centred_pose() -> Pose3D {
        Pose3D::new(
            0,
            std::array::from_fn(|j| Vec3::new(-700.0 + 100.0 * j as f64, -300.0 + 40.0 * j as f64, 4000.0 + 10.0 * j as f64)),
        )
    }

    #[test]
    fn all_visible_and_all_occluded() {
        let c = cam();
        let comps = person_components(&[centred_pose()], &c, &TargetConfig::default()).unwrap();
        let b = split_by_visibility(&comps, &labels([VISIBLE; NUM_JOINTS]), &c).unwrap();
        assert_eq!(b.visible, b.all);
        assert!(b.occluded.keypoints.iter().all(|&v| v == 0.0));
        let b = split_by_visibility(&comps, &labels([OCCLUDED; NUM_JOINTS]), &c).unwrap();
        assert_eq!(b.occluded, b.all);
        assert!(b.visible.pafs.iter().all(|&v| v == 0.0));
        assert!(b.occluded_support.keypoints.iter().any(|&v| v == 1.0));
    }

    #[test]
    fn mismatched_labels_rejected() {
        let c = cam();
        let comps = person_components(&[centred_pose()], &c, &TargetConfig::default()).unwrap();
        let l = OcclusionLabels { labels: vec![] };
        assert!(split_by_visibility(&comps, &l, &c).is_err());
    }

    #[test]
    fn one_visible_endpoint_edge_is_occluded() {
        let mut row = [VISIBLE; NUM_JOINTS];
        row[L_ELBOW] = OCCLUDED;
        assert_eq!(edge_class(&row, 3), Some(OCCLUDED));
        assert_eq!(edge_class(&row, 2), Some(VISIBLE));
        row[L_SHOULDER] = TRUNCATED;
        assert_eq!(edge_class(&row, 3), None);
    }
}
